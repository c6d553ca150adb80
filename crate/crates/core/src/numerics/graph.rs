//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward computation. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and adds the
//! resulting gradients into the [`ParamStore`] entries that were read through
//! [`Graph::param`]. Frozen parameters enter the tape as constants, so any
//! subgraph that only depends on constants is skipped during the backward walk.

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Real, Tensor};
use crate::error::{invalid, shape_err, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
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
    requires_grad: bool,
}

/// Shape bookkeeping for one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (n, c, h, w) = match input {
            &[n, c, h, w] => (n, c, h, w),
            _ => return Err(shape_err!("conv2d input must be [N,C,H,W], got {input:?}")),
        };
        let (o, ci, kh, kw) = match weight {
            &[o, ci, kh, kw] => (o, ci, kh, kw),
            _ => return Err(shape_err!("conv2d weight must be [O,C,K,K], got {weight:?}")),
        };
        if ci != c {
            return Err(shape_err!(
                "conv2d input {input:?} has {c} channels but weight {weight:?} expects {ci}"
            ));
        }
        if kh != kw {
            return Err(shape_err!("conv2d kernel must be square, got {weight:?}"));
        }
        if stride == 0 {
            return Err(invalid!("conv2d stride must be >= 1"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(shape_err!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            ));
        }
        Ok(Self {
            batch: n,
            in_channels: c,
            out_channels: o,
            height: h,
            width: w,
            kernel: kh,
            stride,
            padding,
            out_height: (h + 2 * padding - kh) / stride + 1,
            out_width: (w + 2 * padding - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.batch * self.out_height * self.out_width
    }

    /// Visits `(row, col, input_index)` for every in-bounds patch entry, where
    /// `row` indexes `(c, kh, kw)` and `col` indexes `(n, oh, ow)`.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let hw_out = self.out_height * self.out_width;
        let cols = self.positions();
        for c in 0..self.in_channels {
            for kh in 0..k {
                for kw in 0..k {
                    let row = (c * k + kh) * k + kw;
                    for n in 0..self.batch {
                        let plane = (n * self.in_channels + c) * self.height * self.width;
                        for oh in 0..self.out_height {
                            let ih = (oh * s + kh) as isize - p;
                            if ih < 0 || ih >= self.height as isize {
                                continue;
                            }
                            let base = plane + ih as usize * self.width;
                            for ow in 0..self.out_width {
                                let iw = (ow * s + kw) as isize - p;
                                if iw < 0 || iw >= self.width as isize {
                                    continue;
                                }
                                let col = n * hw_out + oh * self.out_width + ow;
                                debug_assert!(col < cols);
                                f(row, col, base + iw as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, input: &[T]) -> Vec<T> {
        let cols = self.positions();
        let mut out = vec![T::zero(); self.patch_len() * cols];
        self.for_each_tap(|row, col, idx| out[row * cols + col] = input[idx]);
        out
    }

    fn col2im<T: Real>(&self, cols_grad: &[T], input_grad: &mut [T]) {
        let cols = self.positions();
        self.for_each_tap(|row, col, idx| input_grad[idx] += cols_grad[row * cols + col]);
    }
}

/// One forward computation and its gradient tape.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Reads a parameter. Frozen parameters are recorded as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), !p.frozen)
    }

    /// Cross-correlation of `[N,C,H,W]` input with `[O,C,K,K]` weights.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(
            self.value(input).shape(),
            self.value(weight).shape(),
            stride,
            padding,
        )?;
        if let Some(b) = bias {
            if self.value(b).shape() != [geom.out_channels] {
                return Err(shape_err!(
                    "conv2d bias {:?} does not match {} output channels",
                    self.value(b).shape(),
                    geom.out_channels
                ));
            }
        }
        let cols = geom.im2col(self.value(input).data());
        let positions = geom.positions();
        let mut out_mat = vec![T::zero(); geom.out_channels * positions];
        gemm(
            false,
            false,
            geom.out_channels,
            positions,
            geom.patch_len(),
            T::one(),
            self.value(weight).data(),
            &cols,
            T::zero(),
            &mut out_mat,
        );
        let hw = geom.out_height * geom.out_width;
        let mut out = vec![T::zero(); out_mat.len()];
        let bias_data = bias.map(|b| self.value(b).data());
        for o in 0..geom.out_channels {
            let b = bias_data.map_or(T::zero(), |d| d[o]);
            for n in 0..geom.batch {
                let src = &out_mat[o * positions + n * hw..o * positions + (n + 1) * hw];
                let dst = &mut out[(n * geom.out_channels + o) * hw..][..hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        let value = Tensor::new(
            vec![geom.batch, geom.out_channels, geom.out_height, geom.out_width],
            out,
        )?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols: if rg { cols } else { Vec::new() },
            },
            rg,
        ))
    }

    /// `y = x · Wᵀ + b` for `x: [N,D]`, `W: [O,D]`, `b: [O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, d) = self.value(input).dims2()?;
        let (o, wd) = self.value(weight).dims2()?;
        if d != wd {
            return Err(shape_err!(
                "linear input {:?} does not match weight {:?}",
                self.value(input).shape(),
                self.value(weight).shape()
            ));
        }
        let mut out = vec![T::zero(); n * o];
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [o] {
                return Err(shape_err!("linear bias {:?} does not match {o} outputs", bv.shape()));
            }
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(
            false,
            true,
            n,
            o,
            d,
            T::one(),
            self.value(input).data(),
            self.value(weight).data(),
            T::one(),
            &mut out,
        );
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![n, o], out)?,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(input);
        self.push(value, Op::Relu(input), rg)
    }

    /// Non-overlapping `size×size` max pooling (kernel = stride = size, floor).
    pub fn max_pool2d(&mut self, input: Var, size: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if size == 0 || size > h || size > w {
            return Err(shape_err!("pool size {size} invalid for {h}x{w} input"));
        }
        let (oh, ow) = (h / size, w / size);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * size * w + j * size;
                    for di in 0..size {
                        for dj in 0..size {
                            let idx = base + (i * size + di) * w + j * size + dj;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::new(vec![n, c, oh, ow], out)?,
            Op::MaxPool {
                input,
                argmax: if rg { argmax } else { Vec::new() },
            },
            rg,
        ))
    }

    /// `[N,C,H,W] → [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let inv = T::one() / T::lit((h * w) as f64);
        let out = self
            .value(input)
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool(input), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y).map(|(value, rg)| self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y).map(|(value, rg)| self.push(value, Op::Mul(a, b), rg))
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err!(
                "elementwise operands differ: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((Tensor::new(va.shape().to_vec(), data)?, self.rg(a) || self.rg(b)))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).map(|v| v * factor);
        let rg = self.rg(input);
        self.push(value, Op::Scale(input, factor), rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().copied().sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(total), Op::Sum(input), rg)
    }

    /// Mean softmax cross-entropy of `[N,C]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.value(logits).dims2()?;
        if n == 0 || labels.is_empty() {
            return Err(invalid!("cross_entropy needs at least one sample"));
        }
        if labels.len() != n {
            return Err(shape_err!("{} labels for {n} logit rows", labels.len()));
        }
        if c < 2 {
            return Err(invalid!("cross_entropy needs at least 2 classes, got {c}"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(invalid!("label {bad} out of range for {c} classes"));
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut total = 0.0f64;
        for (i, row) in x.chunks(c).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[i * c..(i + 1) * c];
            let mut denom = T::zero();
            for (pj, &v) in p.iter_mut().zip(row) {
                *pj = (v - max).exp();
                denom += *pj;
            }
            for pj in p.iter_mut() {
                *pj = *pj / denom;
            }
            let lse = max.as_f64() + denom.as_f64().ln();
            total += lse - row[labels[i]].as_f64();
        }
        let loss = T::lit(total / n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`, adding gradients into `store`.
    ///
    /// Gradients accumulate: call [`ParamStore::zero_grad`] between batches.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads, store);
        }
        Ok(())
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        store: &mut ParamStore<T>,
    ) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.accumulate_grad(*id, g),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let positions = geom.positions();
                let hw = geom.out_height * geom.out_width;
                let oc = geom.out_channels;
                // dY as [O, N·Ho·Wo]
                let mut gmat = vec![T::zero(); oc * positions];
                for n in 0..geom.batch {
                    for o in 0..oc {
                        let src = &g[(n * oc + o) * hw..][..hw];
                        gmat[o * positions + n * hw..][..hw].copy_from_slice(src);
                    }
                }
                if let Some(b) = bias {
                    acc(*b, &mut |gb| {
                        for o in 0..oc {
                            gb[o] += gmat[o * positions..(o + 1) * positions].iter().copied().sum();
                        }
                    });
                }
                acc(*weight, &mut |gw| {
                    gemm(false, true, oc, geom.patch_len(), positions, T::one(), &gmat, cols, T::one(), gw);
                });
                let w = self.value(*weight).data();
                acc(*input, &mut |gx| {
                    let mut gcols = vec![T::zero(); geom.patch_len() * positions];
                    gemm(true, false, geom.patch_len(), positions, oc, T::one(), w, &gmat, T::zero(), &mut gcols);
                    geom.col2im(&gcols, gx);
                });
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (n, d) = self.nodes[input.0].value.dims2().expect("rank 2");
                let o = g.len() / n;
                if let Some(b) = bias {
                    acc(*b, &mut |gb| {
                        for row in g.chunks(o) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    });
                }
                let x = self.value(*input).data();
                acc(*weight, &mut |gw| gemm(true, false, o, d, n, T::one(), g, x, T::one(), gw));
                let w = self.value(*weight).data();
                acc(*input, &mut |gx| gemm(false, false, n, d, o, T::one(), g, w, T::one(), gx));
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                acc(*input, &mut |gx| {
                    for ((a, &v), &gv) in gx.iter_mut().zip(x).zip(g) {
                        if v > T::zero() {
                            *a += gv;
                        }
                    }
                });
            }
            Op::MaxPool { input, argmax } => acc(*input, &mut |gx| {
                for (&idx, &gv) in argmax.iter().zip(g) {
                    gx[idx] += gv;
                }
            }),
            Op::GlobalAvgPool(input) => {
                let (_, _, h, w) = self.value(*input).dims4().expect("rank 4");
                let inv = T::one() / T::lit((h * w) as f64);
                acc(*input, &mut |gx| {
                    for (plane, &gv) in gx.chunks_mut(h * w).zip(g) {
                        for a in plane {
                            *a += gv * inv;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    acc(*v, &mut |gx| {
                        for (x, &gv) in gx.iter_mut().zip(g) {
                            *x += gv;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |gx| {
                    for ((x, &gv), &o) in gx.iter_mut().zip(g).zip(vb) {
                        *x += gv * o;
                    }
                });
                acc(*b, &mut |gx| {
                    for ((x, &gv), &o) in gx.iter_mut().zip(g).zip(va) {
                        *x += gv * o;
                    }
                });
            }
            Op::Scale(input, factor) => acc(*input, &mut |gx| {
                for (x, &gv) in gx.iter_mut().zip(g) {
                    *x += gv * *factor;
                }
            }),
            Op::Sum(input) => acc(*input, &mut |gx| {
                for x in gx.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / T::lit(n as f64);
                acc(*logits, &mut |gx| {
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            gx[i * c + j] += (probs[i * c + j] - onehot) * scale;
                        }
                    }
                });
            }
        }
    }
}
