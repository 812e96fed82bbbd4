//! Tape of recorded operations and the reverse sweep over it.

use rayon::prelude::*;

use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{s, Scalar, Tensor};

const NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleGrad(Var, T),
    AddBias {
        x: Var,
        bias: Var,
    },
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Tanh(Var),
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    SpatialMean(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Gram(Var),
    SelectColumns {
        x: Var,
        cols: Vec<usize>,
    },
    WeightedSum {
        weights: Var,
        tokens: Var,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// A dynamically recorded computation. Values are pushed in evaluation
/// order, so the node list is already topologically sorted.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NumericOverflow { op })
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = *d + v;
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records backward rules.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A graph for frozen inference: values only, no backward.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf. Leaves with `requires_grad` receive gradients in
    /// [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let needs_grad = requires_grad && self.recording;
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated for `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        rule: impl FnOnce() -> Op<T>,
    ) -> Result<Var> {
        check(op, &value)?;
        let needs_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { rule() } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| p + q)
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("add", out, &[a, b], || Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| p * q)
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("mul", out, &[a, b], || Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.push("scale", out, &[a], || Op::Scale(a, factor))
    }

    /// Identity forward; multiplies the incoming gradient by `factor`.
    pub fn scale_grad(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = self.value(a).clone();
        self.push("scale_grad", out, &[a], || Op::ScaleGrad(a, factor))
    }

    /// Adds a per-channel bias along axis 1 (`x`: `[N, C, ...]`, `bias`: `[C]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = self.value(bias).len();
        if xs.len() < 2 || xs[1] != c {
            return Err(Error::shape("add_bias", &xs, self.shape(bias)));
        }
        let inner: usize = xs[2..].iter().product();
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + bv[(i / inner) % c];
        }
        self.push("add_bias", out, &[x, bias], || Op::AddBias { x, bias })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut c);
        let out = Tensor::new(vec![m, n], c)?;
        self.push("matmul", out, &[a, b], || Op::MatMul(a, b))
    }

    /// Affine map `x·wᵀ + b` with `x`: `[N, in]`, `w`: `[out, in]`, `b`: `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let (n, inp, outp) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [outp] {
                return Err(Error::shape("linear bias", self.shape(b), &[outp]));
            }
        }
        let mut y = vec![T::zero(); n * outp];
        kernels::gemm_nt(
            n,
            inp,
            outp,
            self.value(x).data(),
            self.value(w).data(),
            &mut y,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_mut(outp) {
                add_into(row, bv);
            }
        }
        let out = Tensor::new(vec![n, outp], y)?;
        let inputs: Vec<Var> = std::iter::once(x).chain(Some(w)).chain(b).collect();
        self.push("linear", out, &inputs, || Op::Linear { x, w, b })
    }

    /// 2-D convolution with symmetric zero padding. `x`: `[N, C, H, W]`,
    /// `w`: `[O, C, k, k]`, `b`: `[O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let (batch, out_c) = (sx[0], sw[0]);
        let geom = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], stride, pad).ok_or_else(|| {
            Error::config(format!(
                "conv2d: kernel {} stride {stride} pad {pad} does not fit input {sx:?}",
                sw[2]
            ))
        })?;
        if let Some(b) = b {
            if self.shape(b) != [out_c] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[out_c]));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let in_sz = geom.in_c * geom.in_h * geom.in_w;
        let p = geom.out_positions();
        let mut y = vec![T::zero(); batch * out_c * p];
        y.par_chunks_mut(out_c * p).enumerate().for_each_init(
            || vec![T::zero(); geom.col_rows() * p],
            |col, (bi, yb)| {
                kernels::im2col(&geom, &xv[bi * in_sz..(bi + 1) * in_sz], col);
                if let Some(bv) = bv {
                    for (co, row) in yb.chunks_mut(p).enumerate() {
                        row.fill(bv[co]);
                    }
                }
                kernels::gemm_nn(out_c, geom.col_rows(), p, wv, col, yb);
            },
        );
        let out = Tensor::new(vec![batch, out_c, geom.out_h, geom.out_w], y)?;
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        self.push("conv2d", out, &inputs, || Op::Conv2d { x, w, b, geom })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", out, &[a], || Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.tanh());
        self.push("tanh", out, &[a], || Op::Tanh(a))
    }

    /// Per-sample, per-channel normalization over the spatial axes with a
    /// learned affine transform.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || self.shape(gamma) != [sx[1]] || self.shape(beta) != [sx[1]] {
            return Err(Error::shape("instance_norm", &sx, self.shape(gamma)));
        }
        let c = sx[1];
        let m = sx[2] * sx[3];
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); sx[0] * c];
        let mut y = vec![T::zero(); xv.len()];
        let mf: T = s(m as f64);
        for (plane, ((src, xh), dst)) in xv
            .chunks(m)
            .zip(xhat.chunks_mut(m))
            .zip(y.chunks_mut(m))
            .enumerate()
        {
            let mean = src.iter().copied().sum::<T>() / mf;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let is = T::one() / (var + s(NORM_EPS)).sqrt();
            inv_std[plane] = is;
            let ch = plane % c;
            for i in 0..m {
                xh[i] = (src[i] - mean) * is;
                dst[i] = xh[i] * gv[ch] + bv[ch];
            }
        }
        let out = Tensor::new(sx, y)?;
        self.push("instance_norm", out, &[x, gamma, beta], || {
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            }
        })
    }

    /// Non-overlapping-or-strided max pooling without padding.
    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || kernel == 0 || stride == 0 || sx[2] < kernel || sx[3] < kernel {
            return Err(Error::config(format!(
                "max_pool: kernel {kernel} stride {stride} on {sx:?}"
            )));
        }
        let (h, w) = (sx[2], sx[3]);
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let xv = self.value(x).data();
        let planes = sx[0] * sx[1];
        let mut y = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for pl in 0..planes {
            let base = pl * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * stride * w + j * stride;
                    for di in 0..kernel {
                        for dj in 0..kernel {
                            let idx = base + (i * stride + di) * w + j * stride + dj;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    y.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![sx[0], sx[1], oh, ow], y)?;
        self.push("max_pool", out, &[x], || Op::MaxPool { x, argmax })
    }

    /// Mean over the spatial axes: `[N, C, H, W]` → `[N, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::usage(format!(
                "spatial_mean expects rank 4, got {sx:?}"
            )));
        }
        let m = sx[2] * sx[3];
        let mf: T = s(m as f64);
        let y = self
            .value(x)
            .data()
            .chunks(m)
            .map(|c| c.iter().copied().sum::<T>() / mf)
            .collect();
        let out = Tensor::new(vec![sx[0], sx[1]], y)?;
        self.push("spatial_mean", out, &[x], || Op::SpatialMean(x))
    }

    /// Softmax along the last axis of a rank-2 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::usage(format!("softmax expects rank 2, got {sx:?}")));
        }
        let mut y = self.value(x).data().to_vec();
        for row in y.chunks_mut(sx[1]) {
            softmax_in_place(row);
        }
        let out = Tensor::new(sx, y)?;
        self.push("softmax", out, &[x], || Op::Softmax(x))
    }

    /// Mean negative log-likelihood of `targets` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &sl, &[targets.len()]));
        }
        let k = sl[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::usage(format!(
                "cross_entropy: target {t} >= {k} classes"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss = loss + lse - row[t];
            softmax_in_place(row);
        }
        loss = loss / s(targets.len() as f64);
        let out = Tensor::scalar(loss);
        let targets = targets.to_vec();
        self.push("cross_entropy", out, &[logits], || Op::CrossEntropy {
            logits,
            targets,
            probs,
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, &[x], || Op::Reshape(x))
    }

    /// `[N, ...]` → `[N, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        let n = sx[0];
        let rest = sx[1..].iter().product::<usize>().max(1);
        self.reshape(x, &[n, rest])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::usage("concat of zero tensors"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::usage(format!(
                "concat axis {axis} out of range for {s0:?}"
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let sv = self.shape(v);
            if sv.len() != s0.len() || sv[..axis] != s0[..axis] || sv[axis + 1..] != s0[axis + 1..]
            {
                return Err(Error::shape("concat", &s0, sv));
            }
            total += sv[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                y.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let out = Tensor::new(shape, y)?;
        let inputs = inputs.to_vec();
        self.push("concat", out, &inputs.clone(), || Op::Concat {
            inputs,
            axis,
        })
    }

    /// Per-sample Gram matrix normalized by `C·H·W`: `[N, C, H, W]` → `[N, C, C]`.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::usage(format!(
                "gram expects [N, C, H, W], got {sx:?}"
            )));
        }
        let (n, c, m) = (sx[0], sx[1], sx[2] * sx[3]);
        let norm: T = s((c * m) as f64);
        let xv = self.value(x).data();
        let mut y = vec![T::zero(); n * c * c];
        for b in 0..n {
            let f = &xv[b * c * m..(b + 1) * c * m];
            let g = &mut y[b * c * c..(b + 1) * c * c];
            for i in 0..c {
                for j in i..c {
                    let v = kernels::dot(&f[i * m..(i + 1) * m], &f[j * m..(j + 1) * m]) / norm;
                    g[i * c + j] = v;
                    g[j * c + i] = v;
                }
            }
        }
        let out = Tensor::new(vec![n, c, c], y)?;
        self.push("gram", out, &[x], || Op::Gram(x))
    }

    /// Gather columns of a rank-2 tensor.
    pub fn select_columns(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || cols.is_empty() {
            return Err(Error::usage(format!(
                "select_columns on {sx:?} with {} columns",
                cols.len()
            )));
        }
        if let Some(&c) = cols.iter().find(|&&c| c >= sx[1]) {
            return Err(Error::usage(format!(
                "select_columns: column {c} out of range for {sx:?}"
            )));
        }
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(sx[0] * cols.len());
        for row in xv.chunks(sx[1]) {
            y.extend(cols.iter().map(|&c| row[c]));
        }
        let out = Tensor::new(vec![sx[0], cols.len()], y)?;
        let cols = cols.to_vec();
        self.push("select_columns", out, &[x], || Op::SelectColumns {
            x,
            cols,
        })
    }

    /// `z[n] = Σ_l weights[n, l] · tokens[n, l, :]`.
    pub fn weighted_sum(&mut self, weights: Var, tokens: Var) -> Result<Var> {
        let (sw, st) = (self.shape(weights).to_vec(), self.shape(tokens).to_vec());
        if sw.len() != 2 || st.len() != 3 || sw[0] != st[0] || sw[1] != st[1] {
            return Err(Error::shape("weighted_sum", &sw, &st));
        }
        let (n, l, d) = (st[0], st[1], st[2]);
        let (wv, tv) = (self.value(weights).data(), self.value(tokens).data());
        let mut y = vec![T::zero(); n * d];
        for b in 0..n {
            let z = &mut y[b * d..(b + 1) * d];
            for li in 0..l {
                let a = wv[b * l + li];
                for (zv, &t) in z
                    .iter_mut()
                    .zip(&tv[(b * l + li) * d..(b * l + li + 1) * d])
                {
                    *zv = *zv + a * t;
                }
            }
        }
        let out = Tensor::new(vec![n, d], y)?;
        self.push("weighted_sum", out, &[weights, tokens], || {
            Op::WeightedSum { weights, tokens }
        })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(total), &[x], || Op::Sum(x))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into every
    /// node that depends on a `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(Error::usage("backward on a non-recording graph"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.backward_rule(i, &grad);
            self.nodes[i].grad = Some(grad);
            for (v, g) in contributions {
                let node = &mut self.nodes[v.0];
                if !node.needs_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => add_into(acc, &g),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_rule(&self, i: usize, gy: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, gy.to_vec()));
                out.push((*b, gy.to_vec()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                out.push((*a, gy.iter().zip(bv).map(|(&g, &q)| g * q).collect()));
                out.push((*b, gy.iter().zip(av).map(|(&g, &p)| g * p).collect()));
            }
            Op::Scale(a, f) | Op::ScaleGrad(a, f) => {
                out.push((*a, gy.iter().map(|&g| g * *f).collect()));
            }
            Op::AddBias { x, bias } => {
                out.push((*x, gy.to_vec()));
                if self.needs(*bias) {
                    let sx = self.shape(*x);
                    let c = sx[1];
                    let inner: usize = sx[2..].iter().product();
                    let mut gb = vec![T::zero(); c];
                    for (k, &g) in gy.iter().enumerate() {
                        gb[(k / inner) % c] = gb[(k / inner) % c] + g;
                    }
                    out.push((*bias, gb));
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::gemm_nt(m, n, k, gy, val(*b), &mut ga);
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::gemm_tn(k, m, n, val(*a), gy, &mut gb);
                    out.push((*b, gb));
                }
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (n, inp, outp) = (sx[0], sx[1], sw[0]);
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); n * inp];
                    kernels::gemm_nn(n, outp, inp, gy, val(*w), &mut gx);
                    out.push((*x, gx));
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); outp * inp];
                    kernels::gemm_tn(outp, n, inp, gy, val(*x), &mut gw);
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); outp];
                    for row in gy.chunks(outp) {
                        add_into(&mut gb, row);
                    }
                    out.push((*b, gb));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let batch = self.shape(*x)[0];
                let out_c = self.shape(*w)[0];
                let p = geom.out_positions();
                let rows = geom.col_rows();
                let in_sz = geom.in_c * geom.in_h * geom.in_w;
                let xv = val(*x);
                let wv = val(*w);
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); out_c * rows];
                    let mut col = vec![T::zero(); rows * p];
                    for bi in 0..batch {
                        kernels::im2col(geom, &xv[bi * in_sz..(bi + 1) * in_sz], &mut col);
                        kernels::gemm_nt(
                            out_c,
                            p,
                            rows,
                            &gy[bi * out_c * p..(bi + 1) * out_c * p],
                            &col,
                            &mut gw,
                        );
                    }
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); out_c];
                    for (k, row) in gy.chunks(p).enumerate() {
                        gb[k % out_c] = gb[k % out_c] + row.iter().copied().sum::<T>();
                    }
                    out.push((*b, gb));
                }
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); batch * in_sz];
                    gx.par_chunks_mut(in_sz).enumerate().for_each_init(
                        || vec![T::zero(); rows * p],
                        |gcol, (bi, gxb)| {
                            gcol.fill(T::zero());
                            kernels::gemm_tn(
                                rows,
                                out_c,
                                p,
                                wv,
                                &gy[bi * out_c * p..(bi + 1) * out_c * p],
                                gcol,
                            );
                            kernels::col2im(geom, gcol, gxb);
                        },
                    );
                    out.push((*x, gx));
                }
            }
            Op::Relu(a) => {
                let y = node.value.data();
                out.push((
                    *a,
                    gy.iter()
                        .zip(y)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                ));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                out.push((
                    *a,
                    gy.iter()
                        .zip(y)
                        .map(|(&g, &v)| g * (T::one() - v * v))
                        .collect(),
                ));
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let sx = self.shape(*x);
                let c = sx[1];
                let m = sx[2] * sx[3];
                let gv = val(*gamma);
                let mut gg = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let mut gx = vec![T::zero(); gy.len()];
                let mf: T = s(m as f64);
                for plane in 0..gy.len() / m {
                    let ch = plane % c;
                    let g = &gy[plane * m..(plane + 1) * m];
                    let xh = &xhat[plane * m..(plane + 1) * m];
                    let sum_g = g.iter().copied().sum::<T>();
                    let sum_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
                    gg[ch] = gg[ch] + sum_gx;
                    gbeta[ch] = gbeta[ch] + sum_g;
                    let k = gv[ch] * inv_std[plane] / mf;
                    for (j, d) in gx[plane * m..(plane + 1) * m].iter_mut().enumerate() {
                        *d = k * (mf * g[j] - sum_g - xh[j] * sum_gx);
                    }
                }
                out.push((*x, gx));
                out.push((*gamma, gg));
                out.push((*beta, gbeta));
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (&idx, &g) in argmax.iter().zip(gy) {
                    gx[idx] = gx[idx] + g;
                }
                out.push((*x, gx));
            }
            Op::SpatialMean(x) => {
                let sx = self.shape(*x);
                let m = sx[2] * sx[3];
                let mf: T = s(m as f64);
                let mut gx = Vec::with_capacity(gy.len() * m);
                for &g in gy {
                    gx.extend(std::iter::repeat_n(g / mf, m));
                }
                out.push((*x, gx));
            }
            Op::Softmax(x) => {
                let k = self.shape(*x)[1];
                let y = node.value.data();
                let mut gx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(k).zip(gy.chunks(k)).zip(gx.chunks_mut(k)) {
                    let dotp = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..k {
                        dr[j] = yr[j] * (gr[j] - dotp);
                    }
                }
                out.push((*x, gx));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = gy[0] / s(targets.len() as f64);
                let mut gx = probs.clone();
                for (row, &t) in gx.chunks_mut(k).zip(targets) {
                    row[t] = row[t] - T::one();
                    for v in row.iter_mut() {
                        *v = *v * scale;
                    }
                }
                out.push((*logits, gx));
            }
            Op::Reshape(x) => out.push((*x, gy.to_vec())),
            Op::Concat { inputs, axis } => {
                let s0 = node.value.shape();
                let outer: usize = s0[..*axis].iter().product();
                let inner: usize = s0[axis + 1..].iter().product();
                let total = s0[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    let mut gv = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        gv.extend_from_slice(&gy[o * total + offset..o * total + offset + len]);
                    }
                    offset += len;
                    out.push((v, gv));
                }
            }
            Op::Gram(x) => {
                let sx = self.shape(*x);
                let (n, c, m) = (sx[0], sx[1], sx[2] * sx[3]);
                let norm: T = s((c * m) as f64);
                let xv = val(*x);
                let mut gx = vec![T::zero(); xv.len()];
                for b in 0..n {
                    let g = &gy[b * c * c..(b + 1) * c * c];
                    // dF = (dG + dGᵀ) F / (C·H·W)
                    let sym: Vec<T> = (0..c * c)
                        .map(|k| (g[k] + g[(k % c) * c + k / c]) / norm)
                        .collect();
                    kernels::gemm_nn(
                        c,
                        c,
                        m,
                        &sym,
                        &xv[b * c * m..(b + 1) * c * m],
                        &mut gx[b * c * m..(b + 1) * c * m],
                    );
                }
                out.push((*x, gx));
            }
            Op::SelectColumns { x, cols } => {
                let w = self.shape(*x)[1];
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (row, grow) in gx.chunks_mut(w).zip(gy.chunks(cols.len())) {
                    for (&c, &g) in cols.iter().zip(grow) {
                        row[c] = row[c] + g;
                    }
                }
                out.push((*x, gx));
            }
            Op::WeightedSum { weights, tokens } => {
                let st = self.shape(*tokens);
                let (n, l, d) = (st[0], st[1], st[2]);
                let (wv, tv) = (val(*weights), val(*tokens));
                let mut gw = vec![T::zero(); n * l];
                let mut gt = vec![T::zero(); n * l * d];
                for b in 0..n {
                    let g = &gy[b * d..(b + 1) * d];
                    for li in 0..l {
                        let r = (b * l + li) * d;
                        gw[b * l + li] = kernels::dot(g, &tv[r..r + d]);
                        let a = wv[b * l + li];
                        for (dst, &gz) in gt[r..r + d].iter_mut().zip(g) {
                            *dst = a * gz;
                        }
                    }
                }
                out.push((*weights, gw));
                out.push((*tokens, gt));
            }
            Op::Sum(x) => {
                out.push((*x, vec![gy[0]; self.value(*x).len()]));
            }
        }
        out
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}
