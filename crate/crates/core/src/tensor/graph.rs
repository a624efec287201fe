use super::gemm::{band_rows, col2im_band, gemm, im2col_band, Window};
use super::shape::{broadcast_shape, broadcast_strides, numel, offsets, strides_of};
use super::{Float, Tensor};
use crate::error::{shape_err, Error, Result};
use rayon::prelude::*;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Log,
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Stride and zero padding of a convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

/// Samples per deterministic weight-gradient reduction chunk. Fixed so that
/// summation order never depends on the worker count.
const GRAD_CHUNK: usize = 8;

enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Affine {
        x: Var,
        scale: T,
    },
    Reduce {
        kind: ReduceKind,
        x: Var,
        map: ReduceMap,
        count: usize,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        win: Window,
        batch: usize,
        out_c: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// normalized input (train) or `x - mean` scaled (eval)
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
        channels: usize,
        plane: usize,
    },
    LogSoftmax {
        x: Var,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
    grad: Option<Vec<T>>,
}

/// Dynamic tape of primitive ops in execution (hence topological) order.
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    visits: usize,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            visits: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes processed by the most recent [`Graph::backward`].
    pub fn backward_visits(&self) -> usize {
        self.visits
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    /// Leaf copied from `t`; tracks gradients iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err!("shape {shape:?} vs {} values", data.len()));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, requires_grad))
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.push(vec![1], vec![value], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("node invariant")
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    // ---- elementwise -------------------------------------------------------

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)?;
        let ma = index_map(&sa, &out_shape);
        let mb = index_map(&sb, &out_shape);
        let (va, vb) = (self.value(a), self.value(b));
        let n = numel(&out_shape);
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
            BinaryKind::Pow => x.powf(y),
        };
        let value: Vec<T> = match (&ma, &mb) {
            (None, None) => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n)
                .map(|i| f(va[at(&ma, i)], vb[at(&mb, i)]))
                .collect(),
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out_shape, value, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn pow(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Pow, a, b)
    }

    /// `x^p` for a constant exponent.
    pub fn powf(&mut self, x: Var, p: T) -> Result<Var> {
        let e = self.scalar(p);
        self.pow(x, e)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if kind == UnaryKind::Log {
            if let Some(bad) = vx.iter().find(|v| !(**v > T::zero())) {
                return Err(Error::Domain(format!("log of non-positive entry {bad}")));
            }
        }
        let value: Vec<T> = match kind {
            UnaryKind::Neg => vx.iter().map(|&v| -v).collect(),
            UnaryKind::Exp => vx.iter().map(|&v| v.exp()).collect(),
            UnaryKind::Log => vx.iter().map(|&v| v.ln()).collect(),
            UnaryKind::Relu => vx.iter().map(|&v| v.max(T::zero())).collect(),
            UnaryKind::Sigmoid => vx.iter().map(|&v| sigmoid(v)).collect(),
        };
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(shape, value, Op::Unary { kind, x }, rg))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    /// `scale · x + shift` with constant scalars.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).iter().map(|&v| scale * v + shift).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(shape, value, Op::Affine { x, scale }, rg)
    }

    // ---- reductions --------------------------------------------------------

    /// Reduces over `axes`. Without `keepdim`, reduced axes are removed
    /// (a full reduction yields shape `[1]`).
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axes.is_empty() {
            return Err(Error::Domain("reduction over an empty axis list".into()));
        }
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() {
                return Err(shape_err!("axis {a} out of range for {shape:?}"));
            }
            reduced[a] = true;
        }
        let kept: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .map(|(&d, &r)| if r { 1 } else { d })
            .collect();
        let map = ReduceMap::new(&shape, &reduced);
        let out_n = numel(&kept);
        let count = numel(&shape) / out_n;
        let vx = self.value(x);
        let mut argmax = Vec::new();
        let value = match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                let mut acc = vec![T::zero(); out_n];
                map.visit(|i, o| acc[o] += vx[i]);
                if kind == ReduceKind::Mean {
                    let c = T::lit(count as f64);
                    acc.iter_mut().for_each(|v| *v /= c);
                }
                acc
            }
            ReduceKind::Max => {
                let mut best = vec![T::neg_infinity(); out_n];
                argmax = vec![usize::MAX; out_n];
                // visits inputs in ascending order; strict comparison keeps
                // the lowest linear index on ties
                map.visit(|i, o| {
                    if argmax[o] == usize::MAX || vx[i] > best[o] {
                        best[o] = vx[i];
                        argmax[o] = i;
                    }
                });
                best
            }
        };
        let out_shape = if keepdim {
            kept
        } else {
            let s: Vec<usize> = shape
                .iter()
                .zip(&reduced)
                .filter(|(_, &r)| !r)
                .map(|(&d, _)| d)
                .collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        let rg = self.requires_grad(x);
        Ok(self.push(
            out_shape,
            value,
            Op::Reduce {
                kind,
                x,
                map,
                count,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, axes, keepdim)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, axes, keepdim)
    }

    pub fn max(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceKind::Max, x, axes, keepdim)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean(x, &axes, false)
    }

    // ---- structural --------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape(x)));
        }
        let value = self.value(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape { x }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| shape_err!("empty concat"))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err!("concat axis {axis} out of range for {first:?}"));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err!("concat of {s:?} with {first:?} along {axis}"));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut value = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                value.extend_from_slice(&self.value(v)[o * len..(o + 1) * len]);
            }
        }
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(
            out_shape,
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `a[m,k] · b[k,n]`, or `a · bᵀ` with `b[n,k]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err!("matmul expects 2-D operands, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err!("matmul inner dims {sa:?} x {sb:?} (trans_b={trans_b})"));
        }
        let mut value = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), trans_b, &mut value, false);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(vec![m, n], value, Op::MatMul { a, b, trans_b }, rg))
    }

    /// Cross-correlation of `x[B,C,H,W]` with `w[O,C,kh,kw]` plus optional `bias[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err!("conv2d expects 4-D input and weight, got {sx:?}, {sw:?}"));
        }
        if sx[1] != sw[1] {
            return Err(shape_err!(
                "conv2d channel mismatch: input has {} channels, weight expects {}",
                sx[1],
                sw[1]
            ));
        }
        if geom.stride == 0 {
            return Err(shape_err!("conv2d stride must be positive"));
        }
        let (hp, wp) = (sx[2] + 2 * geom.pad, sx[3] + 2 * geom.pad);
        if hp < sw[2] || wp < sw[3] {
            return Err(shape_err!("kernel {:?} larger than padded input {hp}x{wp}", &sw[2..]));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(shape_err!("conv bias shape {:?}, expected [{}]", self.shape(b), sw[0]));
            }
        }
        let win = Window {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride: geom.stride,
            pad: geom.pad,
            out_h: (hp - sw[2]) / geom.stride + 1,
            out_w: (wp - sw[3]) / geom.stride + 1,
        };
        let (batch, out_c) = (sx[0], sw[0]);
        let in_len = win.channels * win.height * win.width;
        let out_len = out_c * win.col_cols();
        let mut value = vec![T::zero(); batch * out_len];
        let (vx, vw) = (self.value(x), self.value(w));
        let vb = bias.map(|b| self.value(b));
        let (rows, plane, ow) = (win.col_rows(), win.col_cols(), win.out_w);
        let band = band_rows(&win);
        value
            .par_chunks_mut(out_len)
            .zip(vx.par_chunks(in_len))
            .for_each_init(
                || vec![T::zero(); if win.is_pointwise() { 0 } else { rows * band * ow }],
                |cols, (out, xs)| {
                    if win.is_pointwise() {
                        gemm(out_c, rows, plane, vw, false, xs, false, out, false);
                    } else {
                        for oy0 in (0..win.out_h).step_by(band) {
                            let oy1 = (oy0 + band).min(win.out_h);
                            let n = (oy1 - oy0) * ow;
                            let cols = &mut cols[..rows * n];
                            im2col_band(xs, &win, oy0, oy1, cols);
                            T::gemm_strided(out_c, rows, n, vw, (rows, 1), cols, (n, 1), &mut out[oy0 * ow..], plane, false);
                        }
                    }
                    if let Some(vb) = vb {
                        for (plane, &b) in out.chunks_mut(plane).zip(vb) {
                            plane.iter_mut().for_each(|v| *v += b);
                        }
                    }
                },
            );
        let rg = self.requires_grad(x) || self.requires_grad(w) || bias.is_some_and(|b| self.requires_grad(b));
        let shape = vec![batch, out_c, win.out_h, win.out_w];
        Ok(self.push(
            shape,
            value,
            Op::Conv2d {
                x,
                w,
                bias,
                win,
                batch,
                out_c,
            },
            rg,
        ))
    }

    /// Windowed max over `x[B,C,H,W]`; padding never wins.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, geom: ConvGeom) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err!("max_pool2d expects 4-D input, got {s:?}"));
        }
        let (hp, wp) = (s[2] + 2 * geom.pad, s[3] + 2 * geom.pad);
        if kernel == 0 || geom.stride == 0 || kernel > hp || kernel > wp {
            return Err(shape_err!("pool window {kernel} invalid for padded input {hp}x{wp}"));
        }
        if geom.pad >= kernel {
            return Err(shape_err!("pool padding {} must be smaller than window {kernel}", geom.pad));
        }
        let (oh, ow) = ((hp - kernel) / geom.stride + 1, (wp - kernel) / geom.stride + 1);
        let planes = s[0] * s[1];
        let (h, w) = (s[2], s[3]);
        let vx = self.value(x);
        let mut value = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut arg = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if arg == usize::MAX || vx[idx] > best {
                                best = vx[idx];
                                arg = idx;
                            }
                        }
                    }
                    value.push(best);
                    argmax.push(arg);
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(vec![s[0], s[1], oh, ow], value, Op::MaxPool2d { x, argmax }, rg))
    }

    /// Batch normalization over `x[B,C,...]` with per-channel affine `gamma`, `beta`.
    ///
    /// With `running = None` the batch statistics are used (biased variance)
    /// and returned as `(mean, var)`; otherwise the given running statistics
    /// are applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(shape_err!("batch_norm expects [B,C,...], got {s:?}"));
        }
        let (batch, channels) = (s[0], s[1]);
        let plane: usize = s[2..].iter().product();
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(shape_err!("batch_norm affine params must be [{channels}]"));
        }
        let vx = self.value(x);
        let count = batch * plane;
        let (mean, var, train) = match running {
            Some((m, v)) => {
                if m.len() != channels || v.len() != channels {
                    return Err(shape_err!("running stats must have {channels} entries"));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                if count < 2 {
                    return Err(Error::Degenerate(
                        "batch norm in train mode needs more than one value per channel".into(),
                    ));
                }
                let n = T::lit(count as f64);
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let p = &vx[(b * channels + c) * plane..(b * channels + c + 1) * plane];
                        mean[c] += lane_sum(p);
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                for b in 0..batch {
                    for c in 0..channels {
                        let p = &vx[(b * channels + c) * plane..(b * channels + c + 1) * plane];
                        var[c] += lane_sq_dev(p, mean[c]);
                    }
                }
                var.iter_mut().for_each(|v| *v /= n);
                (mean, var, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); vx.len()];
        let mut value = vec![T::zero(); vx.len()];
        for b in 0..batch {
            for c in 0..channels {
                let r = (b * channels + c) * plane..(b * channels + c + 1) * plane;
                for ((h, y), &v) in xhat[r.clone()].iter_mut().zip(&mut value[r.clone()]).zip(&vx[r]) {
                    *h = (v - mean[c]) * inv_std[c];
                    *y = vg[c] * *h + vb[c];
                }
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let out = self.push(
            s,
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                channels,
                plane,
            },
            rg,
        );
        Ok((out, train.then_some((mean, var))))
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let k = *s.last().ok_or_else(|| shape_err!("log_softmax of rank-0 tensor"))?;
        let vx = self.value(x);
        let mut value = Vec::with_capacity(vx.len());
        for row in vx.chunks(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            value.extend(row.iter().map(|&v| v - lse));
        }
        let rg = self.requires_grad(x);
        Ok(self.push(s, value, Op::LogSoftmax { x }, rg))
    }

    /// `out[i] = x[i, index[i]]` for `x[B,K]`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != index.len() {
            return Err(shape_err!("gather of {} indices from {s:?}", index.len()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= s[1]) {
            return Err(Error::Domain(format!("index {bad} out of range for {} classes", s[1])));
        }
        let vx = self.value(x);
        let value = index.iter().enumerate().map(|(r, &c)| vx[r * s[1] + c]).collect();
        let rg = self.requires_grad(x);
        Ok(self.push(
            vec![index.len()],
            value,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    // ---- reverse pass ------------------------------------------------------

    /// Reverse-mode sweep from a single-element output.
    ///
    /// Intermediate gradients are recomputed on each call; leaf gradients
    /// accumulate across calls.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.node(out).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.node(out).shape
            )));
        }
        if !self.requires_grad(out) {
            return Err(Error::Contract(
                "output does not depend on any differentiable leaf".into(),
            ));
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        self.accumulate(out, vec![T::one()]);
        self.visits = 0;
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            self.visits += 1;
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let contributions = self.input_grads(i);
            for (v, g) in contributions {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            None => node.grad = Some(g),
        }
    }

    fn input_grads(&self, i: usize) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let g = node.grad.as_deref().expect("visited node has a gradient");
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ma = index_map(self.shape(*a), &node.shape);
                let mb = index_map(self.shape(*b), &node.shape);
                if ma.is_none() && mb.is_none() && !matches!(kind, BinaryKind::Pow) {
                    let zip = |f: &dyn Fn(T, T, T) -> T| -> Vec<T> {
                        g.iter().zip(va).zip(vb).map(|((&d, &x), &y)| f(d, x, y)).collect()
                    };
                    if rg(*a) {
                        let ga = match kind {
                            BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                            BinaryKind::Mul => zip(&|d, _, y| d * y),
                            _ => zip(&|d, _, y| d / y),
                        };
                        out.push((*a, ga));
                    }
                    if rg(*b) {
                        let gb = match kind {
                            BinaryKind::Add => g.to_vec(),
                            BinaryKind::Sub => g.iter().map(|&d| -d).collect(),
                            BinaryKind::Mul => zip(&|d, x, _| d * x),
                            _ => zip(&|d, x, y| -d * x / (y * y)),
                        };
                        out.push((*b, gb));
                    }
                    return out;
                }
                if rg(*a) {
                    let mut ga = vec![T::zero(); va.len()];
                    for (j, &gj) in g.iter().enumerate() {
                        let (ia, ib) = (at(&ma, j), at(&mb, j));
                        let (x, y) = (va[ia], vb[ib]);
                        ga[ia] += gj
                            * match kind {
                                BinaryKind::Add | BinaryKind::Sub => T::one(),
                                BinaryKind::Mul => y,
                                BinaryKind::Div => T::one() / y,
                                BinaryKind::Pow => pow_dbase(x, y),
                            };
                    }
                    out.push((*a, ga));
                }
                if rg(*b) {
                    let mut gb = vec![T::zero(); vb.len()];
                    for (j, &gj) in g.iter().enumerate() {
                        let (ia, ib) = (at(&ma, j), at(&mb, j));
                        let (x, y) = (va[ia], vb[ib]);
                        gb[ib] += gj
                            * match kind {
                                BinaryKind::Add => T::one(),
                                BinaryKind::Sub => -T::one(),
                                BinaryKind::Mul => x,
                                BinaryKind::Div => -x / (y * y),
                                BinaryKind::Pow => {
                                    if x > T::zero() {
                                        node.value[j] * x.ln()
                                    } else {
                                        T::zero()
                                    }
                                }
                            };
                    }
                    out.push((*b, gb));
                }
            }
            Op::Unary { kind, x } => {
                let vx = self.value(*x);
                let y = &node.value;
                let gx: Vec<T> = match kind {
                    UnaryKind::Neg => g.iter().map(|&v| -v).collect(),
                    UnaryKind::Exp => g.iter().zip(y).map(|(&d, &e)| d * e).collect(),
                    UnaryKind::Log => g.iter().zip(vx).map(|(&d, &v)| d / v).collect(),
                    UnaryKind::Relu => g
                        .iter()
                        .zip(vx)
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect(),
                    UnaryKind::Sigmoid => g
                        .iter()
                        .zip(y)
                        .map(|(&d, &s)| d * s * (T::one() - s))
                        .collect(),
                };
                out.push((*x, gx));
            }
            Op::Affine { x, scale } => {
                out.push((*x, g.iter().map(|&d| d * *scale).collect()));
            }
            Op::Reduce {
                kind,
                x,
                map,
                count,
                argmax,
            } => {
                let mut gx = vec![T::zero(); map.len()];
                match kind {
                    ReduceKind::Sum => map.visit(|i, o| gx[i] = g[o]),
                    ReduceKind::Mean => {
                        let c = T::lit(*count as f64);
                        map.visit(|i, o| gx[i] = g[o] / c)
                    }
                    ReduceKind::Max => argmax.iter().zip(g).for_each(|(&i, &d)| gx[i] += d),
                }
                out.push((*x, gx));
            }
            Op::Reshape { x } => out.push((*x, g.to_vec())),
            Op::Concat { inputs, axis } => {
                let inner: usize = node.shape[axis + 1..].iter().product();
                let outer: usize = node.shape[..*axis].iter().product();
                let lens: Vec<usize> = inputs.iter().map(|&v| self.shape(v)[*axis] * inner).collect();
                let row: usize = lens.iter().sum();
                let mut offset = 0;
                for (&v, &len) in inputs.iter().zip(&lens) {
                    if rg(v) {
                        let mut gv = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            gv.extend_from_slice(&g[o * row + offset..o * row + offset + len]);
                        }
                        out.push((v, gv));
                    }
                    offset += len;
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = node.shape[1];
                if rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, g, false, self.value(*b), !*trans_b, &mut ga, false);
                    out.push((*a, ga));
                }
                if rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    if *trans_b {
                        gemm(n, m, k, g, true, self.value(*a), false, &mut gb, false);
                    } else {
                        gemm(k, m, n, self.value(*a), true, g, false, &mut gb, false);
                    }
                    out.push((*b, gb));
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                win,
                batch,
                out_c,
            } => {
                self.conv_backward(g, *x, *w, *bias, win, *batch, *out_c, &mut out);
            }
            Op::MaxPool2d { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                argmax.iter().zip(g).for_each(|(&i, &d)| gx[i] += d);
                out.push((*x, gx));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                channels,
                plane,
            } => {
                let (c_n, p_n) = (*channels, *plane);
                let batch = g.len() / (c_n * p_n);
                let mut sum_dy = vec![T::zero(); c_n];
                let mut sum_dy_xhat = vec![T::zero(); c_n];
                for b in 0..batch {
                    for c in 0..c_n {
                        let r = (b * c_n + c) * p_n..(b * c_n + c + 1) * p_n;
                        sum_dy[c] += lane_sum(&g[r.clone()]);
                        sum_dy_xhat[c] += lane_dot(&g[r.clone()], &xhat[r]);
                    }
                }
                if rg(*x) {
                    let vg = self.value(*gamma);
                    let n = T::lit((batch * p_n) as f64);
                    let mut gx = vec![T::zero(); g.len()];
                    for b in 0..batch {
                        for c in 0..c_n {
                            let r = (b * c_n + c) * p_n..(b * c_n + c + 1) * p_n;
                            let k = vg[c] * inv_std[c];
                            let (shift, slope) = if *train {
                                (k * sum_dy[c] / n, k * sum_dy_xhat[c] / n)
                            } else {
                                (T::zero(), T::zero())
                            };
                            for ((dx, &d), &h) in gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                                *dx = k * d - shift - slope * h;
                            }
                        }
                    }
                    out.push((*x, gx));
                }
                if rg(*gamma) {
                    out.push((*gamma, sum_dy_xhat));
                }
                if rg(*beta) {
                    out.push((*beta, sum_dy));
                }
            }
            Op::LogSoftmax { x } => {
                let k = *node.shape.last().expect("rank >= 1");
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(k).zip(node.value.chunks(k)) {
                    let total: T = gr.iter().copied().sum();
                    gx.extend(gr.iter().zip(yr).map(|(&d, &y)| d - y.exp() * total));
                }
                out.push((*x, gx));
            }
            Op::Gather { x, index } => {
                let k = self.shape(*x)[1];
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (r, (&c, &d)) in index.iter().zip(g).enumerate() {
                    gx[r * k + c] += d;
                }
                out.push((*x, gx));
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        g: &[T],
        x: Var,
        w: Var,
        bias: Option<Var>,
        win: &Window,
        batch: usize,
        out_c: usize,
        out: &mut Vec<(Var, Vec<T>)>,
    ) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let (vx, vw) = (self.value(x), self.value(w));
        let in_len = win.channels * win.height * win.width;
        let plane = win.col_cols();
        let out_len = out_c * plane;
        let (rows, cols_n) = (win.col_rows(), win.col_cols());
        let (band, ow) = (band_rows(win), win.out_w);
        let (need_dx, need_dw) = (rg(x), rg(w));
        if let Some(b) = bias.filter(|&b| rg(b)) {
            let mut gb = vec![T::zero(); out_c];
            for sample in g.chunks(out_len) {
                for (o, p) in sample.chunks(plane).enumerate() {
                    gb[o] += p.iter().copied().sum::<T>();
                }
            }
            out.push((b, gb));
        }
        if !need_dx && !need_dw {
            return;
        }
        let mut gx = if need_dx { vec![T::zero(); batch * in_len] } else { Vec::new() };
        let chunk_grads: Vec<Vec<T>> = {
            let dx_chunks: Vec<&mut [T]> = if need_dx {
                gx.chunks_mut(GRAD_CHUNK * in_len).collect()
            } else {
                (0..batch.div_ceil(GRAD_CHUNK)).map(|_| &mut [][..]).collect()
            };
            dx_chunks
                .into_par_iter()
                .zip(vx.par_chunks(GRAD_CHUNK * in_len))
                .zip(g.par_chunks(GRAD_CHUNK * out_len))
                .map(|((dx, xs), gs)| {
                    let mut dw = if need_dw { vec![T::zero(); vw.len()] } else { Vec::new() };
                    let scratch = if win.is_pointwise() { 0 } else { rows * band * ow };
                    let (mut cols, mut dcols) = (vec![T::zero(); scratch], vec![T::zero(); scratch]);
                    for (s, (xb, gb)) in xs.chunks(in_len).zip(gs.chunks(out_len)).enumerate() {
                        let dxb = if need_dx { &mut dx[s * in_len..(s + 1) * in_len] } else { &mut [][..] };
                        if win.is_pointwise() {
                            if need_dw {
                                gemm(out_c, cols_n, rows, gb, false, xb, true, &mut dw, true);
                            }
                            if need_dx {
                                gemm(rows, out_c, cols_n, vw, true, gb, false, dxb, false);
                            }
                            continue;
                        }
                        for oy0 in (0..win.out_h).step_by(band) {
                            let oy1 = (oy0 + band).min(win.out_h);
                            let n = (oy1 - oy0) * ow;
                            let g_band = &gb[oy0 * ow..];
                            if need_dw {
                                let cols = &mut cols[..rows * n];
                                im2col_band(xb, win, oy0, oy1, cols);
                                T::gemm_strided(out_c, n, rows, g_band, (plane, 1), cols, (1, n), &mut dw, rows, true);
                            }
                            if need_dx {
                                let dcols = &mut dcols[..rows * n];
                                T::gemm_strided(rows, out_c, n, vw, (1, rows), g_band, (plane, 1), dcols, n, false);
                                col2im_band(dcols, win, oy0, oy1, dxb);
                            }
                        }
                    }
                    dw
                })
                .collect()
        };
        if need_dw {
            let mut gw = vec![T::zero(); vw.len()];
            for part in &chunk_grads {
                gw.iter_mut().zip(part).for_each(|(a, &b)| *a += b);
            }
            out.push((w, gw));
        }
        if need_dx {
            out.push((x, gx));
        }
    }
}

/// Input-to-output index correspondence of a reduction.
#[derive(Clone, Debug)]
pub(crate) enum ReduceMap {
    /// Reduced axes form one contiguous run: input `[outer, red, inner]`
    /// maps to output `[outer, inner]`.
    Block { outer: usize, red: usize, inner: usize },
    Table(Vec<usize>),
}

impl ReduceMap {
    fn new(shape: &[usize], reduced: &[bool]) -> Self {
        let first = reduced.iter().position(|&r| r).unwrap_or(0);
        let last = reduced.iter().rposition(|&r| r).unwrap_or(0);
        if reduced[first..=last].iter().all(|&r| r) {
            return ReduceMap::Block {
                outer: shape[..first].iter().product(),
                red: shape[first..=last].iter().product(),
                inner: shape[last + 1..].iter().product(),
            };
        }
        let kept: Vec<usize> = shape.iter().zip(reduced).map(|(&d, &r)| if r { 1 } else { d }).collect();
        let strides: Vec<usize> = strides_of(&kept)
            .iter()
            .zip(reduced)
            .map(|(&s, &r)| if r { 0 } else { s })
            .collect();
        ReduceMap::Table(offsets(shape, &strides))
    }

    fn len(&self) -> usize {
        match self {
            ReduceMap::Block { outer, red, inner } => outer * red * inner,
            ReduceMap::Table(t) => t.len(),
        }
    }

    /// Calls `f(input_index, output_index)` in ascending input order.
    #[inline]
    fn visit(&self, mut f: impl FnMut(usize, usize)) {
        match *self {
            ReduceMap::Block { outer, red, inner } => {
                let mut i = 0;
                for a in 0..outer {
                    for _ in 0..red {
                        for k in 0..inner {
                            f(i, a * inner + k);
                            i += 1;
                        }
                    }
                }
            }
            ReduceMap::Table(ref t) => t.iter().enumerate().for_each(|(i, &o)| f(i, o)),
        }
    }
}

const LANES: usize = 8;

/// Sum with eight interleaved accumulators (vectorizes; fixed order).
#[inline]
fn lane_sum<T: Float>(xs: &[T]) -> T {
    lane_fold(xs, xs, |x, _| x)
}

#[inline]
fn lane_dot<T: Float>(a: &[T], b: &[T]) -> T {
    lane_fold(a, b, |x, y| x * y)
}

#[inline]
fn lane_sq_dev<T: Float>(xs: &[T], mean: T) -> T {
    lane_fold(xs, xs, |x, _| (x - mean) * (x - mean))
}

#[inline]
fn lane_fold<T: Float>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> T {
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += f(x[l], y[l]);
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += f(x, y);
    }
    acc.iter().fold(T::zero(), |s, &v| s + v) + tail
}

fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// d(x^y)/dx, with the removable cases at x = 0 resolved to their limits.
fn pow_dbase<T: Float>(x: T, y: T) -> T {
    if y == T::zero() {
        T::zero()
    } else if x == T::zero() && y > T::one() {
        T::zero()
    } else {
        y * x.powf(y - T::one())
    }
}

/// Broadcast index map from `src` into `out`, or `None` when identical.
fn index_map(src: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    if src == out {
        None
    } else {
        Some(offsets(out, &broadcast_strides(src, out)))
    }
}

#[inline]
fn at(map: &Option<Vec<usize>>, i: usize) -> usize {
    match map {
        Some(m) => m[i],
        None => i,
    }
}
