//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a Wengert list: every op appends a node whose inputs have
//! smaller indices, so the node order is already a topological order and
//! `backward` is a single reverse sweep. Graphs are built fresh for every
//! forward pass and dropped afterwards.

use crate::error::{Error, Result};
use crate::tensor::{ReducePlan, Scalar, Tensor};

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Epsilon added to the variance inside batch normalization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.height * self.width
    }

    /// 1x1, stride 1, no padding: the patch matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Clamp01(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, T),
    SumAxes {
        input: Var,
        plan: ReducePlan,
    },
    ConcatChannels(Var, Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Result of [`Graph::batch_norm`]: the output plus the per-channel
/// statistics that were used (batch statistics in training mode).
pub struct NormOutput<T> {
    pub output: Var,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Which statistics a normalization node uses.
pub enum NormStats<'a, T> {
    /// Per-channel mean/variance of the current batch.
    Batch,
    /// Fixed statistics, e.g. running averages at inference.
    Fixed { mean: &'a [T], var: &'a [T] },
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `var`, if it
    /// was reachable and requires a gradient.
    pub fn grad(&self, var: Var) -> Option<Tensor<T>> {
        let shape = self.nodes[var.0].value.shape();
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(shape, g.clone()).expect("grad matches value shape"))
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let rg = self.requires_grad(x);
        self.push(value, rg, op)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, rg, op))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn clamp01(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()).min(T::one()), Op::Clamp01(x))
    }

    pub fn scalar_mul(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::ScalarMul(x, s))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let plan = ReducePlan::new(self.shape(x), axes)?;
        let value = self.value(x).sum_axes(axes)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::SumAxes { input: x, plan }))
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        if self.value(x).numel() == 0 {
            return Err(Error::EmptyTensor { op: "mean" });
        }
        let count = ReducePlan::new(self.shape(x), axes)?.reduced_count;
        let s = self.sum_axes(x, axes)?;
        Ok(self.scalar_mul(s, T::one() / T::from_usize(count).unwrap()))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum_axes(x, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean_axes(x, &axes)
    }

    /// Nearest-neighbour 2x upsampling of an `N x C x H x W` tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("upsample2x", self.shape(x))?;
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    d[y * ow + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Upsample2x(x)))
    }

    /// Concatenate two `N x C x H x W` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = dims4("concat_channels", self.shape(a))?;
        let (nb, cb, hb, wb) = dims4("concat_channels", self.shape(b))?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape("concat_channels", self.shape(a), self.shape(b)));
        }
        let plane = h * w;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&va[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&vb[i * cb * plane..(i + 1) * cb * plane]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], out)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, rg, Op::ConcatChannels(a, b)))
    }

    /// 2-D cross-correlation with zero padding.
    ///
    /// `input` is `N x C x H x W`, `kernel` is `F x C x k x k`, `bias` is `F`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (batch, channels, height, width) = dims4("conv2d", self.shape(input))?;
        let (filters, kc, kh, kw) = dims4("conv2d", self.shape(kernel))?;
        if kc != channels {
            return Err(Error::Dimension {
                op: "conv2d",
                reason: format!("input has {channels} channels but kernel expects {kc}"),
            });
        }
        if kh != kw {
            return Err(Error::Dimension {
                op: "conv2d",
                reason: format!("kernel must be square, got {kh}x{kw}"),
            });
        }
        if stride == 0 {
            return Err(Error::Dimension {
                op: "conv2d",
                reason: "stride must be at least 1".into(),
            });
        }
        if kh > height + 2 * padding || kw > width + 2 * padding {
            return Err(Error::Dimension {
                op: "conv2d",
                reason: format!(
                    "kernel {kh} larger than padded input {height}x{width} (padding {padding})"
                ),
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [filters] {
                return Err(Error::shape("conv2d bias", &[filters], self.shape(b)));
            }
        }
        let geom = ConvGeom {
            batch,
            channels,
            height,
            width,
            filters,
            kernel: kh,
            stride,
            padding,
            out_h: (height + 2 * padding - kh) / stride + 1,
            out_w: (width + 2 * padding - kw) / stride + 1,
        };

        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let out_plane = geom.out_plane();
        let mut out = vec![T::zero(); batch * filters * out_plane];
        let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { geom.patch_len() * out_plane }];
        for n in 0..batch {
            let xn = &x[n * channels * geom.in_plane()..(n + 1) * channels * geom.in_plane()];
            let patches: &[T] = if geom.is_pointwise() {
                xn
            } else {
                im2col(xn, &geom, &mut cols);
                &cols
            };
            let on = &mut out[n * filters * out_plane..(n + 1) * filters * out_plane];
            if let Some(b) = bias {
                let bv = self.value(b).data();
                for (f, row) in on.chunks_exact_mut(out_plane).enumerate() {
                    row.fill(bv[f]);
                }
            }
            T::gemm(
                filters,
                geom.patch_len(),
                out_plane,
                T::one(),
                k,
                (geom.patch_len() as isize, 1),
                patches,
                (out_plane as isize, 1),
                if bias.is_some() { T::one() } else { T::zero() },
                on,
            );
        }
        let value = Tensor::new(&[batch, filters, geom.out_h, geom.out_w], out)?;
        let rg = self.requires_grad(input)
            || self.requires_grad(kernel)
            || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// Per-channel normalization over (N, H, W) followed by a learned
    /// per-channel scale and shift.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
    ) -> Result<NormOutput<T>> {
        let (n, c, h, w) = dims4("batch_norm", self.shape(input))?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("batch_norm", &[c], self.shape(p)));
            }
        }
        let plane = h * w;
        let count = T::from_usize(n * plane).unwrap();
        let x = self.value(input).data();
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for i in 0..n {
                        s += x[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().copied().sum();
                    }
                    let m = s / count;
                    let mut v = T::zero();
                    for i in 0..n {
                        for &xv in &x[(i * c + ch) * plane..(i * c + ch + 1) * plane] {
                            v += (xv - m) * (xv - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v / count;
                }
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm stats", &[c], &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let eps = T::from_f64_lossy(NORM_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normalized = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for i in 0..n {
            for ch in 0..c {
                let range = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                for j in range {
                    let xh = (x[j] - mean[ch]) * inv_std[ch];
                    normalized[j] = xh;
                    out[j] = g[ch] * xh + b[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.requires_grad(input) || self.requires_grad(gamma) || self.requires_grad(beta);
        let output = self.push(
            value,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            },
        );
        Ok(NormOutput { output, mean, var })
    }

    /// Populate gradients of `loss` (a single-element tensor) into every
    /// node that requires one. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: shape.to_vec(),
            });
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient buffer for `var`, allocated on first use; `None` if `var`
    /// does not require a gradient.
    fn sink(&mut self, var: Var) -> Option<&mut [T]> {
        if !self.nodes[var.0].requires_grad {
            return None;
        }
        let len = self.nodes[var.0].value.numel();
        Some(self.grads[var.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn accumulate_map(&mut self, var: Var, g: &[T], f: impl Fn(usize, T) -> T) {
        if let Some(dst) = self.sink(var) {
            for (i, (d, &gv)) in dst.iter_mut().zip(g).enumerate() {
                *d += f(i, gv);
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Ops that only need the input values are handled by cloning the
        // small amount of metadata they need out of the node first.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Relu(x) => {
                let x = *x;
                let xv = self.nodes[x.0].value.data().to_vec();
                self.accumulate_map(x, g, |j, gv| if xv[j] > T::zero() { gv } else { T::zero() });
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let y = self.nodes[i].value.data().to_vec();
                self.accumulate_map(x, g, |j, gv| gv * y[j] * (T::one() - y[j]));
            }
            Op::Abs(x) => {
                let x = *x;
                let xv = self.nodes[x.0].value.data().to_vec();
                self.accumulate_map(x, g, |j, gv| {
                    if xv[j] > T::zero() {
                        gv
                    } else if xv[j] < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Clamp01(x) => {
                let x = *x;
                let xv = self.nodes[x.0].value.data().to_vec();
                self.accumulate_map(x, g, |j, gv| {
                    if xv[j] > T::zero() && xv[j] < T::one() {
                        gv
                    } else {
                        T::zero()
                    }
                });
            }
            Op::ScalarMul(x, s) => {
                let (x, s) = (*x, *s);
                self.accumulate_map(x, g, |_, gv| gv * s);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate_map(a, g, |_, gv| gv);
                self.accumulate_map(b, g, |_, gv| gv);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate_map(a, g, |_, gv| gv);
                self.accumulate_map(b, g, |_, gv| -gv);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let va = self.nodes[a.0].value.data().to_vec();
                let vb = self.nodes[b.0].value.data().to_vec();
                self.accumulate_map(a, g, |j, gv| gv * vb[j]);
                self.accumulate_map(b, g, |j, gv| gv * va[j]);
            }
            Op::SumAxes { input, plan } => {
                let input = *input;
                let plan = plan.clone();
                if let Some(dst) = self.sink(input) {
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d += g[plan.out_index(j)];
                    }
                }
            }
            Op::Upsample2x(x) => {
                let x = *x;
                let [n, c, h, w] = self.nodes[x.0].value.shape() else {
                    unreachable!("validated in forward")
                };
                let (planes, h, w) = (n * c, *h, *w);
                let ow = 2 * w;
                if let Some(dst) = self.sink(x) {
                    for p in 0..planes {
                        let gp = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dp = &mut dst[p * h * w..(p + 1) * h * w];
                        for (y, row) in gp.chunks_exact(ow).enumerate() {
                            for (xx, &gv) in row.iter().enumerate() {
                                dp[(y / 2) * w + xx / 2] += gv;
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let (a, b) = (*a, *b);
                let [n, ca, h, w] = *self.nodes[a.0].value.shape() else {
                    unreachable!("validated in forward")
                };
                let cb = self.nodes[b.0].value.shape()[1];
                let plane = h * w;
                let stride = (ca + cb) * plane;
                if let Some(dst) = self.sink(a) {
                    for s in 0..n {
                        let src = &g[s * stride..s * stride + ca * plane];
                        for (d, &gv) in dst[s * ca * plane..(s + 1) * ca * plane].iter_mut().zip(src) {
                            *d += gv;
                        }
                    }
                }
                if let Some(dst) = self.sink(b) {
                    for s in 0..n {
                        let src = &g[s * stride + ca * plane..(s + 1) * stride];
                        for (d, &gv) in dst[s * cb * plane..(s + 1) * cb * plane].iter_mut().zip(src) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (input, kernel, bias, geom) = (*input, *kernel, *bias, *geom);
                self.conv_backward(input, kernel, bias, geom, g);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let (input, gamma, beta, batch_stats) = (*input, *gamma, *beta, *batch_stats);
                let normalized = normalized.clone();
                let inv_std = inv_std.clone();
                self.norm_backward(input, gamma, beta, &normalized, &inv_std, batch_stats, g);
            }
        }
    }

    fn conv_backward(&mut self, input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom, g: &[T]) {
        let out_plane = geom.out_plane();
        let patch = geom.patch_len();
        let in_len = geom.channels * geom.in_plane();
        let out_len = geom.filters * out_plane;

        if let Some(b) = bias {
            if let Some(db) = self.sink(b) {
                for n in 0..geom.batch {
                    for (f, row) in g[n * out_len..(n + 1) * out_len].chunks_exact(out_plane).enumerate() {
                        db[f] += row.iter().copied().sum();
                    }
                }
            }
        }

        let need_kernel = self.nodes[kernel.0].requires_grad;
        let need_input = self.nodes[input.0].requires_grad;
        if !need_kernel && !need_input {
            return;
        }
        let x = self.nodes[input.0].value.data().to_vec();
        let k = self.nodes[kernel.0].value.data().to_vec();
        let mut cols = vec![T::zero(); patch * out_plane];
        let mut dk = need_kernel.then(|| vec![T::zero(); geom.filters * patch]);
        let mut dx = need_input.then(|| vec![T::zero(); x.len()]);
        for n in 0..geom.batch {
            let gn = &g[n * out_len..(n + 1) * out_len];
            let xn = &x[n * in_len..(n + 1) * in_len];
            if let Some(dk) = dk.as_mut() {
                let patches: &[T] = if geom.is_pointwise() {
                    xn
                } else {
                    im2col(xn, &geom, &mut cols);
                    &cols
                };
                // dK += dY (F x P) * patches^T (P x CKK)
                T::gemm(
                    geom.filters,
                    out_plane,
                    patch,
                    T::one(),
                    gn,
                    (out_plane as isize, 1),
                    patches,
                    (1, out_plane as isize),
                    T::one(),
                    dk,
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx[n * in_len..(n + 1) * in_len];
                if geom.is_pointwise() {
                    // dX = K^T (C x F) * dY (F x P), accumulated directly.
                    T::gemm(
                        patch,
                        geom.filters,
                        out_plane,
                        T::one(),
                        &k,
                        (1, patch as isize),
                        gn,
                        (out_plane as isize, 1),
                        T::one(),
                        dxn,
                    );
                } else {
                    T::gemm(
                        patch,
                        geom.filters,
                        out_plane,
                        T::one(),
                        &k,
                        (1, patch as isize),
                        gn,
                        (out_plane as isize, 1),
                        T::zero(),
                        &mut cols,
                    );
                    col2im(&cols, &geom, dxn);
                }
            }
        }
        if let Some(dk) = dk {
            if let Some(dst) = self.sink(kernel) {
                dst.iter_mut().zip(dk).for_each(|(d, v)| *d += v);
            }
        }
        if let Some(dx) = dx {
            if let Some(dst) = self.sink(input) {
                dst.iter_mut().zip(dx).for_each(|(d, v)| *d += v);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: &[T],
        inv_std: &[T],
        batch_stats: bool,
        g: &[T],
    ) {
        let [n, c, h, w] = *self.nodes[input.0].value.shape() else {
            unreachable!("validated in forward")
        };
        let plane = h * w;
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                for j in (i * c + ch) * plane..(i * c + ch + 1) * plane {
                    sum_g[ch] += g[j];
                    sum_gx[ch] += g[j] * normalized[j];
                }
            }
        }
        if let Some(dg) = self.sink(gamma) {
            dg.iter_mut().zip(&sum_gx).for_each(|(d, &v)| *d += v);
        }
        if let Some(db) = self.sink(beta) {
            db.iter_mut().zip(&sum_g).for_each(|(d, &v)| *d += v);
        }
        let gam = self.nodes[gamma.0].value.data().to_vec();
        let count = T::from_usize(n * plane).unwrap();
        if let Some(dx) = self.sink(input) {
            for i in 0..n {
                for ch in 0..c {
                    let scale = gam[ch] * inv_std[ch];
                    for j in (i * c + ch) * plane..(i * c + ch + 1) * plane {
                        dx[j] += if batch_stats {
                            scale * (g[j] - sum_g[ch] / count - normalized[j] * sum_gx[ch] / count)
                        } else {
                            scale * g[j]
                        };
                    }
                }
            }
        }
    }
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::Dimension {
            op,
            reason: format!("expected a 4-D tensor, got shape {shape:?}"),
        }),
    }
}

/// Expand one image (`C x H x W`) into its patch matrix (`C*k*k x Ho*Wo`).
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let out_plane = g.out_plane();
    for c in 0..g.channels {
        let xc = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * out_plane;
                let dst = &mut cols[row..row + out_plane];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ki) as isize - p;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - p;
                        *d = if ix >= 0 && ix < g.width as isize {
                            src[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto an image.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let out_plane = g.out_plane();
    for c in 0..g.channels {
        let dc = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * out_plane;
                let src = &cols[row..row + out_plane];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ki) as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * s + kj) as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            dc[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}
