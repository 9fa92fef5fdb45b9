//! Tape of differentiable operations.
//!
//! A [`Graph`] records every intermediate value together with the operation
//! that produced it. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients for every node that (transitively) depends on a
//! leaf created with `requires_grad`.

use super::kernels::{self, ConvGeom};
use super::{Float, Tensor};
use crate::error::{ensure, Error, Result};
use crate::wavelet;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Wavelet sub-band selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Band {
    LL,
    HL,
    LH,
    HH,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::LL, Band::HL, Band::LH, Band::HH];
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    PadEdge {
        input: Var,
        pad: usize,
    },
    Concat(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Abs(Var),
    /// Straight-through masking: value and gradient pass where the mask is set.
    MaskPass {
        input: Var,
        mask: Vec<bool>,
    },
    Dwt {
        input: Var,
        band: Band,
    },
    Modulate {
        x: Var,
        scale: Var,
        shift: Var,
    },
    MatMul(Var, Var),
    AddBias(Var, Var),
    NodeMix {
        x: Var,
        mix: Vec<T>,
        nodes: usize,
    },
    MeanNodes(Var),
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.slots.get(v.0).and_then(|s| s.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.slots.get_mut(v.0).and_then(Option::take)
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input: no gradient is tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable or differentiated input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            "{what}: shapes {:?} and {:?} differ",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    /// Cross-correlation of a `B×C×H×W` map with `O×C×Kh×Kw` weights.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom(input, weight, stride, pad)?;
        if let Some(b) = bias {
            ensure!(
                self.shape(b) == [geom.out_c],
                "conv2d bias shape {:?} does not match {} output channels",
                self.shape(b),
                geom.out_c
            );
        }
        let batch = self.shape(input)[0];
        let mut out = vec![T::zero(); batch * geom.out_c * geom.out_plane()];
        kernels::conv_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
            batch,
            &mut out,
        );
        let value = Tensor::from_parts(vec![batch, geom.out_c, geom.out_h, geom.out_w], out);
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let ng = self.any_grad(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            ng,
        ))
    }

    fn conv_geom(&self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<ConvGeom> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        ensure!(
            xs.len() == 4 && ws.len() == 4,
            "conv2d expects rank-4 input and weight, got {xs:?} and {ws:?}"
        );
        ensure!(
            xs[1] == ws[1],
            "conv2d input {xs:?} has {} channels but weight {ws:?} expects {}",
            xs[1],
            ws[1]
        );
        ensure!(stride > 0, "conv2d stride must be positive");
        let span_h = xs[2] + 2 * pad;
        let span_w = xs[3] + 2 * pad;
        ensure!(
            span_h >= ws[2] && span_w >= ws[3],
            "conv2d kernel {ws:?} larger than padded input {xs:?}"
        );
        Ok(ConvGeom {
            in_c: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_c: ws[0],
            k_h: ws[2],
            k_w: ws[3],
            stride,
            pad,
            out_h: (span_h - ws[2]) / stride + 1,
            out_w: (span_w - ws[3]) / stride + 1,
        })
    }

    /// Bilinear upsampling with half-pixel centres (align-corners disabled).
    pub fn upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        ensure!(factor >= 1, "upsample factor must be at least 1");
        let (b, c, h, w) = self.value(input).dims4()?;
        if factor == 1 {
            let v = self.value(input).clone();
            let ng = self.needs_grad(input);
            return Ok(self.push(v, Op::Reshape(input), ng));
        }
        let mut out = vec![T::zero(); b * c * h * w * factor * factor];
        kernels::upsample_forward(self.value(input).data(), b * c, h, w, factor, &mut out);
        let value = Tensor::from_parts(vec![b, c, h * factor, w * factor], out);
        let ng = self.needs_grad(input);
        Ok(self.push(value, Op::Upsample { input, factor }, ng))
    }

    /// Grow each spatial side by `pad`, repeating the border samples.
    pub fn pad_edge(&mut self, input: Var, pad: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for plane in src.chunks(h * w) {
            for y in 0..oh {
                let row = &plane[y.saturating_sub(pad).min(h - 1) * w..][..w];
                out.extend(std::iter::repeat_n(row[0], pad));
                out.extend_from_slice(row);
                out.extend(std::iter::repeat_n(row[w - 1], pad));
            }
        }
        let value = Tensor::from_parts(vec![b, c, oh, ow], out);
        let ng = self.needs_grad(input);
        Ok(self.push(value, Op::PadEdge { input, pad }, ng))
    }

    /// Channel concatenation in argument order.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        ensure!(!inputs.is_empty(), "concat needs at least one input");
        let (b, _, h, w) = self.value(inputs[0]).dims4()?;
        let mut total_c = 0;
        for &v in inputs {
            let (vb, vc, vh, vw) = self.value(v).dims4()?;
            ensure!(
                (vb, vh, vw) == (b, h, w),
                "concat: shape {:?} does not match {:?} outside the channel axis",
                self.shape(v),
                self.shape(inputs[0])
            );
            total_c += vc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(b * total_c * plane);
        for bi in 0..b {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        let value = Tensor::from_parts(vec![b, total_c, h, w], out);
        let ng = self.any_grad(inputs);
        Ok(self.push(value, Op::Concat(inputs.to_vec()), ng))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.needs_grad(x);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        let ng = self.needs_grad(x);
        self.push(value, Op::Abs(x), ng)
    }

    /// `|a - b|` elementwise.
    pub fn abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        Ok(self.abs(d))
    }

    /// Zero every entry whose mask bit is clear; gradient flows straight
    /// through the retained entries only.
    pub fn mask_pass(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        ensure!(
            mask.len() == self.value(x).len(),
            "mask of length {} for tensor {:?}",
            mask.len(),
            self.shape(x)
        );
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &keep)| if keep { v } else { T::zero() })
            .collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        let ng = self.needs_grad(x);
        Ok(self.push(value, Op::MaskPass { input: x, mask }, ng))
    }

    /// One sub-band of the single-level Haar analysis of `x`.
    pub fn dwt_band(&mut self, x: Var, band: Band) -> Result<Var> {
        wavelet::check_even(self.shape(x))?;
        let (b, c, h, w) = self.value(x).dims4()?;
        let data = wavelet::analysis_band(self.value(x).data(), b * c, h, w, band);
        let value = Tensor::from_parts(vec![b, c, h / 2, w / 2], data);
        let ng = self.needs_grad(x);
        Ok(self.push(value, Op::Dwt { input: x, band }, ng))
    }

    /// `x · (1 + scale) + shift` with `scale`, `shift` of shape `B×C`
    /// broadcast over the spatial extent of `x: B×C×H×W`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        for v in [scale, shift] {
            ensure!(
                self.shape(v) == [b, c],
                "modulation vector {:?} does not match feature map {:?}",
                self.shape(v),
                self.shape(x)
            );
        }
        let plane = h * w;
        let xs = self.value(x).data();
        let ss = self.value(scale).data();
        let bs = self.value(shift).data();
        let mut out = Vec::with_capacity(xs.len());
        for (i, chunk) in xs.chunks_exact(plane).enumerate() {
            let s = T::one() + ss[i];
            let sh = bs[i];
            out.extend(chunk.iter().map(|&v| v * s + sh));
        }
        let value = Tensor::from_parts(vec![b, c, h, w], out);
        let ng = self.any_grad(&[x, scale, shift]);
        Ok(self.push(value, Op::Modulate { x, scale, shift }, ng))
    }

    /// `[r, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        ensure!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shapes {sa:?} and {sb:?} are incompatible"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
        );
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    /// Row-broadcast bias: `[r, n] + [n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        ensure!(
            sx.len() == 2 && self.shape(bias) == [sx[1]],
            "bias {:?} does not broadcast over {:?}",
            self.shape(bias),
            sx
        );
        let n = sx[1];
        let bv = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % n])
            .collect();
        let value = Tensor::from_parts(sx.to_vec(), data);
        let ng = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), ng))
    }

    /// Left-multiply every `N×F` slice of `x: B×N×F` by a constant
    /// row-stochastic `N×N` matrix. Rows are mixed as `x_i + Σ_j m_ij (x_j − x_i)`,
    /// so a signal that is constant over the nodes passes through exactly.
    pub fn node_mix(&mut self, x: Var, mix: &Tensor<T>) -> Result<Var> {
        let sx = self.shape(x);
        ensure!(sx.len() == 3, "node features must be B×N×F, got {sx:?}");
        let (b, n, f) = (sx[0], sx[1], sx[2]);
        ensure!(
            mix.shape() == [n, n],
            "mixing matrix {:?} does not match {n} nodes",
            mix.shape()
        );
        for (i, row) in mix.data().chunks(n).enumerate() {
            let total: f64 = row.iter().map(|&v| Float::to_f64(v)).sum();
            ensure!((total - 1.0).abs() <= 1e-5, "mixing row {i} sums to {total}, not 1");
        }
        let xs = self.value(x).data();
        let mut out = xs.to_vec();
        for bi in 0..b {
            let block = &xs[bi * n * f..(bi + 1) * n * f];
            let dst = &mut out[bi * n * f..(bi + 1) * n * f];
            for i in 0..n {
                let xi = &block[i * f..(i + 1) * f];
                let yi = &mut dst[i * f..(i + 1) * f];
                for (j, &m) in mix.data()[i * n..(i + 1) * n].iter().enumerate() {
                    if j == i || m == T::zero() {
                        continue;
                    }
                    for ((y, &a), &c) in yi.iter_mut().zip(&block[j * f..(j + 1) * f]).zip(xi) {
                        *y += m * (a - c);
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![b, n, f], out);
        let ng = self.needs_grad(x);
        Ok(self.push(
            value,
            Op::NodeMix {
                x,
                mix: mix.data().to_vec(),
                nodes: n,
            },
            ng,
        ))
    }

    /// Mean over the node axis: `B×N×F -> B×F`.
    pub fn mean_nodes(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        ensure!(sx.len() == 3, "node features must be B×N×F, got {sx:?}");
        let (b, n, f) = (sx[0], sx[1], sx[2]);
        let xs = self.value(x).data();
        let inv = T::one() / T::from_f64(n as f64);
        let mut out = vec![T::zero(); b * f];
        for bi in 0..b {
            for ni in 0..n {
                let row = &xs[(bi * n + ni) * f..(bi * n + ni + 1) * f];
                add_into(&mut out[bi * f..(bi + 1) * f], row);
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::from_parts(vec![b, f], out);
        let ng = self.needs_grad(x);
        Ok(self.push(value, Op::MeanNodes(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.needs_grad(x);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(x).data() {
            s += v;
        }
        let ng = self.needs_grad(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Mean pixel-wise cross-entropy of `B×K×H×W` logits against class
    /// indices laid out `B×H×W`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k, h, w) = self.value(logits).dims4()?;
        let plane = h * w;
        ensure!(
            labels.len() == b * plane,
            "{} labels for logits {:?}",
            labels.len(),
            self.shape(logits)
        );
        if let Some(i) = labels.iter().position(|&l| l >= k) {
            let (bi, rest) = (i / plane, i % plane);
            return Err(Error::Contract(format!(
                "label {} at pixel (item {bi}, row {}, col {}) outside 0..{k}",
                labels[i],
                rest / w,
                rest % w
            )));
        }
        let xs = self.value(logits).data();
        let mut probs = vec![T::zero(); xs.len()];
        let mut total = 0.0f64;
        for bi in 0..b {
            let base = bi * k * plane;
            for p in 0..plane {
                let mut mx = T::neg_infinity();
                for c in 0..k {
                    mx = mx.max(xs[base + c * plane + p]);
                }
                let mut z = T::zero();
                for c in 0..k {
                    let e = (xs[base + c * plane + p] - mx).exp();
                    probs[base + c * plane + p] = e;
                    z += e;
                }
                let inv = T::one() / z;
                for c in 0..k {
                    probs[base + c * plane + p] *= inv;
                }
                let l = labels[bi * plane + p];
                let logp = xs[base + l * plane + p] - mx - z.ln();
                total -= logp.to_f64();
            }
        }
        let loss = T::from_f64(total / (b * plane) as f64);
        let ng = self.needs_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse sweep from a single-element node.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        ensure!(
            self.value(root).len() == 1,
            "backward needs a scalar root, got shape {:?}",
            self.shape(root)
        );
        let mut slots: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = slots[idx].take() else { continue };
            self.propagate(idx, &g, &mut slots);
        }
        Ok(Grads { slots })
    }

    fn slot<'a>(&self, slots: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(slots[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, idx: usize, g: &[T], slots: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let geom = self
                    .conv_geom(*input, *weight, *stride, *pad)
                    .expect("geometry validated in forward");
                let batch = self.shape(*input)[0];
                // Separate buffers because the slots alias one vector.
                let mut dx = self.nodes[input.0]
                    .needs_grad
                    .then(|| vec![T::zero(); self.value(*input).len()]);
                let mut dw = self.nodes[weight.0]
                    .needs_grad
                    .then(|| vec![T::zero(); self.value(*weight).len()]);
                let mut db = bias
                    .filter(|b| self.nodes[b.0].needs_grad)
                    .map(|_| vec![T::zero(); geom.out_c]);
                kernels::conv_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    &geom,
                    batch,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let (Some(d), Some(s)) = (dx, self.slot(slots, *input)) {
                    add_into(s, &d);
                }
                if let (Some(d), Some(s)) = (dw, self.slot(slots, *weight)) {
                    add_into(s, &d);
                }
                if let (Some(d), Some(b)) = (db, bias) {
                    if let Some(s) = self.slot(slots, *b) {
                        add_into(s, &d);
                    }
                }
            }
            Op::Upsample { input, factor } => {
                let (b, c, h, w) = self.value(*input).dims4().expect("rank checked");
                if let Some(s) = self.slot(slots, *input) {
                    kernels::upsample_backward(g, b * c, h, w, *factor, s);
                }
            }
            Op::PadEdge { input, pad } => {
                let (_, _, h, w) = self.value(*input).dims4().expect("rank checked");
                let (oh, ow) = (h + 2 * pad, w + 2 * pad);
                if let Some(s) = self.slot(slots, *input) {
                    for (dst, up) in s.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                        for y in 0..oh {
                            let row = &mut dst[y.saturating_sub(*pad).min(h - 1) * w..][..w];
                            for (x, &v) in up[y * ow..(y + 1) * ow].iter().enumerate() {
                                row[x.saturating_sub(*pad).min(w - 1)] += v;
                            }
                        }
                    }
                }
            }
            Op::Concat(inputs) => {
                let (b, total_c, h, w) = node.value.dims4().expect("rank checked");
                let plane = h * w;
                let mut offset = 0;
                for &v in inputs {
                    let c = self.shape(v)[1];
                    if let Some(s) = self.slot(slots, v) {
                        for bi in 0..b {
                            let src = &g[(bi * total_c + offset) * plane..(bi * total_c + offset + c) * plane];
                            add_into(&mut s[bi * c * plane..(bi + 1) * c * plane], src);
                        }
                    }
                    offset += c;
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(slots, v) {
                        add_into(s, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(slots, *a) {
                    add_into(s, g);
                }
                if let Some(s) = self.slot(slots, *b) {
                    for (d, &gv) in s.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(slots, *a) {
                    for ((d, &gv), &y) in s.iter_mut().zip(g).zip(vb) {
                        *d += gv * y;
                    }
                }
                if let Some(s) = self.slot(slots, *b) {
                    for ((d, &gv), &x) in s.iter_mut().zip(g).zip(va) {
                        *d += gv * x;
                    }
                }
            }
            Op::Relu(x) => {
                let out = node.value.data();
                if let Some(s) = self.slot(slots, *x) {
                    for ((d, &gv), &o) in s.iter_mut().zip(g).zip(out) {
                        if o > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Abs(x) => {
                let xs = self.value(*x).data();
                if let Some(s) = self.slot(slots, *x) {
                    for ((d, &gv), &v) in s.iter_mut().zip(g).zip(xs) {
                        if v > T::zero() {
                            *d += gv;
                        } else if v < T::zero() {
                            *d -= gv;
                        }
                    }
                }
            }
            Op::MaskPass { input, mask } => {
                if let Some(s) = self.slot(slots, *input) {
                    for ((d, &gv), &keep) in s.iter_mut().zip(g).zip(mask) {
                        if keep {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Dwt { input, band } => {
                let (b, c, h, w) = self.value(*input).dims4().expect("rank checked");
                if let Some(s) = self.slot(slots, *input) {
                    wavelet::synthesis_band_add(g, b * c, h, w, *band, s);
                }
            }
            Op::Modulate { x, scale, shift } => {
                let (_, _, h, w) = self.value(*x).dims4().expect("rank checked");
                let plane = h * w;
                let xs = self.value(*x).data();
                let ss = self.value(*scale).data();
                if let Some(s) = self.slot(slots, *x) {
                    for (i, (dchunk, gchunk)) in s.chunks_exact_mut(plane).zip(g.chunks_exact(plane)).enumerate() {
                        let f = T::one() + ss[i];
                        for (d, &gv) in dchunk.iter_mut().zip(gchunk) {
                            *d += gv * f;
                        }
                    }
                }
                if let Some(s) = self.slot(slots, *scale) {
                    for (i, (gchunk, xchunk)) in g.chunks_exact(plane).zip(xs.chunks_exact(plane)).enumerate() {
                        let mut acc = T::zero();
                        for (&gv, &xv) in gchunk.iter().zip(xchunk) {
                            acc += gv * xv;
                        }
                        s[i] += acc;
                    }
                }
                if let Some(s) = self.slot(slots, *shift) {
                    for (i, gchunk) in g.chunks_exact(plane).enumerate() {
                        let mut acc = T::zero();
                        for &gv in gchunk {
                            acc += gv;
                        }
                        s[i] += acc;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(slots, *a) {
                    // dA (m×k) += G (m×n) · Bᵀ
                    T::gemm(m, n, k, g, (n as isize, 1), vb, (1, n as isize), T::one(), s);
                }
                if let Some(s) = self.slot(slots, *b) {
                    // dB (k×n) += Aᵀ · G
                    T::gemm(k, m, n, va, (1, k as isize), g, (n as isize, 1), T::one(), s);
                }
            }
            Op::AddBias(x, bias) => {
                let n = self.shape(*bias)[0];
                if let Some(s) = self.slot(slots, *x) {
                    add_into(s, g);
                }
                if let Some(s) = self.slot(slots, *bias) {
                    for row in g.chunks_exact(n) {
                        add_into(s, row);
                    }
                }
            }
            Op::NodeMix { x, mix, nodes } => {
                let n = *nodes;
                let sx = self.shape(*x);
                let (b, f) = (sx[0], sx[2]);
                if let Some(s) = self.slot(slots, *x) {
                    for bi in 0..b {
                        T::gemm(
                            n,
                            n,
                            f,
                            mix,
                            (1, n as isize),
                            &g[bi * n * f..(bi + 1) * n * f],
                            (f as isize, 1),
                            T::one(),
                            &mut s[bi * n * f..(bi + 1) * n * f],
                        );
                    }
                }
            }
            Op::MeanNodes(x) => {
                let sx = self.shape(*x);
                let (b, n, f) = (sx[0], sx[1], sx[2]);
                let inv = T::one() / T::from_f64(n as f64);
                if let Some(s) = self.slot(slots, *x) {
                    for bi in 0..b {
                        let grow = &g[bi * f..(bi + 1) * f];
                        for ni in 0..n {
                            let row = &mut s[(bi * n + ni) * f..(bi * n + ni + 1) * f];
                            for (d, &gv) in row.iter_mut().zip(grow) {
                                *d += gv * inv;
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = self.slot(slots, *x) {
                    add_into(s, g);
                }
            }
            Op::Sum(x) => {
                let gv = g[0];
                if let Some(s) = self.slot(slots, *x) {
                    s.iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (b, k, h, w) = self.value(*logits).dims4().expect("rank checked");
                let plane = h * w;
                let scale = g[0] / T::from_f64((b * plane) as f64);
                if let Some(s) = self.slot(slots, *logits) {
                    for (d, &p) in s.iter_mut().zip(probs) {
                        *d += p * scale;
                    }
                    for bi in 0..b {
                        for p in 0..plane {
                            let l = labels[bi * plane + p];
                            s[bi * k * plane + l * plane + p] -= scale;
                        }
                    }
                }
            }
        }
    }
}
