//! Tape-based reverse-mode autodiff.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and `backward` simply walks it in reverse.

use crate::conv::{conv2d_backward, conv2d_forward, ConvDims};
use crate::error::{invalid, mismatch, Result};
use crate::sample::{bilinear_tap, from_channel_last, sample_backward, sample_forward, to_channel_last, Tap};
use crate::tensor::strides;
use crate::{Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, dims: ConvDims },
    Linear { x: Var, w: Var, b: Var, rows: usize, din: usize, dout: usize },
    Relu { x: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    AvgPool2 { x: Var },
    Upsample2 { x: Var },
    Concat { a: Var, b: Var, outer: usize, a_inner: usize, b_inner: usize },
    GridSample { f: Var, taps: Vec<Tap<T>>, batch: usize, n: usize, c: usize, hw: usize },
    Permute { x: Var, axes: Vec<usize> },
    Reshape { x: Var },
    MaxAxis { x: Var, argmax: Vec<usize> },
    MeanAxis { x: Var, outer: usize, len: usize, inner: usize },
    Sum { x: Var },
    Mul { a: Var, b: Var },
    Mse { pred: Var, target: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node; outstanding `Var`s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Keeps the first `len` nodes, dropping everything recorded after them.
    /// Vars with index `>= len` become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad;
        t.grad = None;
        self.push(t, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 {
            return Err(mismatch("conv2d", format!("input must be [B,Cin,H,W], got {xs:?}")));
        }
        if ws.len() != 4 {
            return Err(mismatch("conv2d", format!("weight must be [Cout,Cin,k,k], got {ws:?}")));
        }
        if ws[1] != xs[1] {
            return Err(mismatch(
                "conv2d",
                format!("Cin axis: input has {} channels, weight expects {}", xs[1], ws[1]),
            ));
        }
        if ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return Err(mismatch("conv2d", format!("kernel axes must be equal and odd, got {}x{}", ws[2], ws[3])));
        }
        if bs != [ws[0]] {
            return Err(mismatch("conv2d", format!("bias axis: expected [{}], got {bs:?}", ws[0])));
        }
        if stride == 0 {
            return Err(invalid("conv2d stride must be >= 1"));
        }
        let k = ws[2];
        let (h, wd) = (xs[2], xs[3]);
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(mismatch(
                "conv2d",
                format!("H/W axes: {h}x{wd} with padding {padding} is smaller than kernel {k}"),
            ));
        }
        let dims = ConvDims {
            batch: xs[0],
            cin: xs[1],
            h,
            w: wd,
            cout: ws[0],
            k,
            stride,
            pad: padding,
            ho: (h + 2 * padding - k) / stride + 1,
            wo: (wd + 2 * padding - k) / stride + 1,
        };
        let out = conv2d_forward(self.data(x), self.data(w), self.data(b), &dims);
        let t = Tensor::new(&[dims.batch, dims.cout, dims.ho, dims.wo], out)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(t, rg, Op::Conv2d { x, w, b, dims }))
    }

    /// Affine map over the last axis: `y = x W^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(mismatch("linear", format!("weight must be [Dout,Din], got {ws:?}")));
        }
        let (dout, din) = (ws[0], ws[1]);
        if xs.last() != Some(&din) {
            return Err(mismatch(
                "linear",
                format!("last input axis is {:?}, weight Din axis is {din}", xs.last()),
            ));
        }
        if self.shape(b) != [dout] {
            return Err(mismatch("linear", format!("bias axis: expected [{dout}], got {:?}", self.shape(b))));
        }
        let rows = self.value(x).numel() / din.max(1);
        let mut out = Vec::with_capacity(rows * dout);
        let bias = self.data(b);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        T::gemm(
            rows,
            din,
            dout,
            T::one(),
            self.data(x),
            (din as isize, 1),
            self.data(w),
            (1, din as isize),
            T::one(),
            &mut out,
            (dout as isize, 1),
        );
        let mut shape = xs;
        *shape.last_mut().expect("rank >= 1") = dout;
        let t = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(t, rg, Op::Linear { x, w, b, rows, din, dout }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&a| a.max(T::zero())).collect())
            .expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Relu { x })
    }

    fn pool_dims(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(mismatch(op, format!("input must be [B,C,H,W], got {s:?}")));
        }
        if !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(mismatch(op, format!("H/W axes must be even for window 2, got {}x{}", s[2], s[3])));
        }
        Ok((s[0] * s[1], s[2], s[3]))
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let (planes, h, w) = self.pool_dims("max_pool2d", x)?;
        let (ho, wo) = (h / 2, w / 2);
        let src = self.data(x);
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[2] = ho;
        shape[3] = wo;
        let t = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, rg, Op::MaxPool2 { x, argmax }))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2d(&mut self, x: Var) -> Result<Var> {
        let (planes, h, w) = self.pool_dims("avg_pool2d", x)?;
        let (ho, wo) = (h / 2, w / 2);
        let src = self.data(x);
        let quarter = T::lit(0.25);
        let mut out = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let i = base + 2 * oy * w + 2 * ox;
                    out.push((src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter);
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[2] = ho;
        shape[3] = wo;
        let t = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, rg, Op::AvgPool2 { x }))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(mismatch("upsample2x", format!("input must be [B,C,H,W], got {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.data(x);
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                let srow = &src[(p * h + y / 2) * w..][..w];
                let drow = &mut out[(p * 2 * h + y) * 2 * w..][..2 * w];
                for (x2, d) in drow.iter_mut().enumerate() {
                    *d = srow[x2 / 2];
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, rg, Op::Upsample2 { x }))
    }

    /// Concatenates along `axis`; every other axis must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() || axis >= sa.len() {
            return Err(mismatch("concat", format!("ranks {sa:?} / {sb:?} with axis {axis}")));
        }
        for (i, (x, y)) in sa.iter().zip(&sb).enumerate() {
            if i != axis && x != y {
                return Err(mismatch("concat", format!("axis {i} differs: {x} vs {y}")));
            }
        }
        let outer: usize = sa[..axis].iter().product();
        let a_inner: usize = sa[axis..].iter().product();
        let b_inner: usize = sb[axis..].iter().product();
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            out.extend_from_slice(&da[o * a_inner..(o + 1) * a_inner]);
            out.extend_from_slice(&db[o * b_inner..(o + 1) * b_inner]);
        }
        let mut shape = sa;
        shape[axis] += sb[axis];
        let t = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, rg, Op::Concat { a, b, outer, a_inner, b_inner }))
    }

    /// Bilinear lookup of `features[B,C,H,W]` at `coords[B,N,2]` (x = column,
    /// y = row, pixel units). Returns `[B,N,C]`. Not differentiable in `coords`.
    pub fn grid_sample_bilinear(&mut self, features: Var, coords: &Tensor<T>) -> Result<Var> {
        let fs = self.shape(features).to_vec();
        let cs = coords.shape();
        if fs.len() != 4 {
            return Err(mismatch("grid_sample_bilinear", format!("features must be [B,C,H,W], got {fs:?}")));
        }
        if cs.len() != 3 || cs[0] != fs[0] || cs[2] != 2 {
            return Err(mismatch(
                "grid_sample_bilinear",
                format!("coords must be [B={},N,2], got {cs:?}", fs[0]),
            ));
        }
        if let Some(bad) = coords.data().iter().position(|c| !c.is_finite()) {
            return Err(invalid(format!("non-finite sampling coordinate at flat index {bad}")));
        }
        let (batch, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
        let n = cs[1];
        let taps: Vec<Tap<T>> = coords
            .data()
            .chunks_exact(2)
            .map(|xy| bilinear_tap(xy[0], xy[1], h, w))
            .collect();
        let cl = to_channel_last(self.data(features), batch, c, h * w);
        let out = sample_forward(&cl, &taps, batch, n, c, h * w);
        let t = Tensor::new(&[batch, n, c], out)?;
        let rg = self.any_grad(&[features]);
        Ok(self.push(
            t,
            rg,
            Op::GridSample {
                f: features,
                taps,
                batch,
                n,
                c,
                hw: h * w,
            },
        ))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid(format!("permute axes {axes:?} invalid for rank {}", s.len())));
        }
        let out = permute_data(self.data(x), &s, axes);
        let shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let t = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, rg, Op::Permute { x, axes: axes.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, rg, Op::Reshape { x }))
    }

    fn axis_split(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize, Vec<usize>)> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(mismatch(op, format!("cannot reduce axis {axis} of {s:?}")));
        }
        let outer = s[..axis].iter().product();
        let inner = s[axis + 1..].iter().product();
        let mut out_shape = s.clone();
        out_shape.remove(axis);
        Ok((outer, s[axis], inner, out_shape))
    }

    /// Maximum over `axis` (removed from the shape). Ties route the gradient
    /// to the first maximal element.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner, shape) = self.axis_split("max_axis", x, axis)?;
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for l in 1..len {
                    let idx = (o * len + l) * inner + i;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, rg, Op::MaxAxis { x, argmax }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner, shape) = self.axis_split("mean_axis", x, axis)?;
        let src = self.data(x);
        let scale = T::one() / T::lit(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let row = &src[(o * len + l) * inner..][..inner];
                dst.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
            }
            dst.iter_mut().for_each(|d| *d *= scale);
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, rg, Op::MeanAxis { x, outer, len, inner }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum { x })
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.shape(a), out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, rg, Op::Mul { a, b }))
    }

    /// Mean squared error `(1/N) sum (pred - target)^2` as a scalar.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(mismatch(
                "mse_loss",
                format!("pred {:?} vs target {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let n = self.value(pred).numel();
        if n == 0 {
            return Err(invalid("mse_loss on empty tensors"));
        }
        let sse: T = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar(sse / T::lit(n as f64)), rg, Op::Mse { pred, target }))
    }

    /// Back-propagates from a scalar `loss`, populating `grad` on every
    /// reachable node that requires it. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(invalid("loss does not depend on any differentiable tensor"));
        }
        self.accumulate(loss, vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.node_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, cg) in contributions {
                self.accumulate(v, cg);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        debug_assert_eq!(g.len(), node.value.numel());
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            None => node.grad = Some(g),
        }
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, dims } => {
                let (dx, dw, db) = conv2d_backward(self.data(*x), self.data(*w), g, dims, wants(x));
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if wants(w) {
                    out.push((*w, dw));
                }
                if wants(b) {
                    out.push((*b, db));
                }
            }
            Op::Linear { x, w, b, rows, din, dout } => {
                let (rows, din, dout) = (*rows, *din, *dout);
                if wants(x) {
                    let mut dx = vec![T::zero(); rows * din];
                    T::gemm(
                        rows,
                        dout,
                        din,
                        T::one(),
                        g,
                        (dout as isize, 1),
                        self.data(*w),
                        (din as isize, 1),
                        T::zero(),
                        &mut dx,
                        (din as isize, 1),
                    );
                    out.push((*x, dx));
                }
                if wants(w) {
                    let mut dw = vec![T::zero(); dout * din];
                    T::gemm(
                        dout,
                        rows,
                        din,
                        T::one(),
                        g,
                        (1, dout as isize),
                        self.data(*x),
                        (din as isize, 1),
                        T::zero(),
                        &mut dw,
                        (din as isize, 1),
                    );
                    out.push((*w, dw));
                }
                if wants(b) {
                    let mut db = vec![T::zero(); dout];
                    for row in g.chunks_exact(dout) {
                        db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                    }
                    out.push((*b, db));
                }
            }
            Op::Relu { x } => {
                if wants(x) {
                    let dx = self
                        .data(*x)
                        .iter()
                        .zip(g)
                        .map(|(&v, &gi)| if v > T::zero() { gi } else { T::zero() })
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if wants(x) {
                    let mut dx = vec![T::zero(); self.value(*x).numel()];
                    for (&idx, &gi) in argmax.iter().zip(g) {
                        dx[idx] += gi;
                    }
                    out.push((*x, dx));
                }
            }
            Op::AvgPool2 { x } => {
                if wants(x) {
                    let s = self.shape(*x);
                    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                    let (ho, wo) = (h / 2, w / 2);
                    let quarter = T::lit(0.25);
                    let mut dx = vec![T::zero(); planes * h * w];
                    for p in 0..planes {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gi = g[(p * ho + oy) * wo + ox] * quarter;
                                let base = p * h * w + 2 * oy * w + 2 * ox;
                                for idx in [base, base + 1, base + w, base + w + 1] {
                                    dx[idx] += gi;
                                }
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Upsample2 { x } => {
                if wants(x) {
                    let s = self.shape(*x);
                    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                    let mut dx = vec![T::zero(); planes * h * w];
                    for p in 0..planes {
                        for y in 0..2 * h {
                            let grow = &g[(p * 2 * h + y) * 2 * w..][..2 * w];
                            let drow = &mut dx[(p * h + y / 2) * w..][..w];
                            for (x2, &gi) in grow.iter().enumerate() {
                                drow[x2 / 2] += gi;
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Concat { a, b, outer, a_inner, b_inner } => {
                let stride = a_inner + b_inner;
                if wants(a) {
                    let mut da = Vec::with_capacity(outer * a_inner);
                    for o in 0..*outer {
                        da.extend_from_slice(&g[o * stride..o * stride + a_inner]);
                    }
                    out.push((*a, da));
                }
                if wants(b) {
                    let mut db = Vec::with_capacity(outer * b_inner);
                    for o in 0..*outer {
                        db.extend_from_slice(&g[o * stride + a_inner..(o + 1) * stride]);
                    }
                    out.push((*b, db));
                }
            }
            Op::GridSample { f, taps, batch, n, c, hw } => {
                if wants(f) {
                    let cl = sample_backward(g, taps, *batch, *n, *c, *hw);
                    out.push((*f, from_channel_last(&cl, *batch, *c, *hw)));
                }
            }
            Op::Permute { x, axes } => {
                if wants(x) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    out.push((*x, permute_data(g, self.shape(Var(i)), &inverse)));
                }
            }
            Op::Reshape { x } => {
                if wants(x) {
                    out.push((*x, g.to_vec()));
                }
            }
            Op::MaxAxis { x, argmax } => {
                if wants(x) {
                    let mut dx = vec![T::zero(); self.value(*x).numel()];
                    for (&idx, &gi) in argmax.iter().zip(g) {
                        dx[idx] += gi;
                    }
                    out.push((*x, dx));
                }
            }
            Op::MeanAxis { x, outer, len, inner } => {
                if wants(x) {
                    let scale = T::one() / T::lit(*len as f64);
                    let mut dx = vec![T::zero(); outer * len * inner];
                    for o in 0..*outer {
                        let grow = &g[o * inner..(o + 1) * inner];
                        for l in 0..*len {
                            let drow = &mut dx[(o * len + l) * inner..][..*inner];
                            drow.iter_mut().zip(grow).for_each(|(d, &gi)| *d = gi * scale);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Sum { x } => {
                if wants(x) {
                    out.push((*x, vec![g[0]; self.value(*x).numel()]));
                }
            }
            Op::Mul { a, b } => {
                if wants(a) {
                    out.push((*a, self.data(*b).iter().zip(g).map(|(&y, &gi)| y * gi).collect()));
                }
                if wants(b) {
                    out.push((*b, self.data(*a).iter().zip(g).map(|(&x, &gi)| x * gi).collect()));
                }
            }
            Op::Mse { pred, target } => {
                let p = self.data(*pred);
                let t = self.data(*target);
                let scale = g[0] * T::lit(2.0 / p.len() as f64);
                if wants(pred) {
                    out.push((*pred, p.iter().zip(t).map(|(&a, &b)| (a - b) * scale).collect()));
                }
                if wants(target) {
                    out.push((*target, p.iter().zip(t).map(|(&a, &b)| (b - a) * scale).collect()));
                }
            }
        }
        out
    }
}

fn permute_data<T: Scalar>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    loop {
        out.push(src[offset]);
        let mut ax = rank;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_x() {
        let mut g = Graph::new();
        let data = [1.0, -2.0, 3.0, 0.5];
        let x = g.param(t(&[4], &data));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        let expected: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap(), &expected[..]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(crate::TensorError::InvalidArgument(_))));
    }

    #[test]
    fn conv_box_sum() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = g.param(Tensor::ones(&[1, 1, 3, 3]));
        let b = g.param(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        let out = g.value(y).data();
        assert_eq!(out[4], 9.0);
        assert_eq!(out[0], 4.0);
        assert_eq!(out[1], 6.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..2 * 5 * 4).map(|i| i as f32 * 0.5 - 3.0).collect();
        let x = g.constant(Tensor::new(&[2, 1, 5, 4], data.clone()).unwrap());
        let w = g.param(Tensor::ones(&[1, 1, 1, 1]));
        let b = g.param(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_reports_channel_axis() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[1, 2, 4, 4]));
        let w = g.param(Tensor::ones(&[1, 3, 3, 3]));
        let b = g.param(Tensor::zeros(&[1]));
        let err = g.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("Cin"), "{err}");
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let eye = g.param(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let zero = g.param(Tensor::zeros(&[3]));
        let y = g.linear(x, eye, zero).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let w0 = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(t(&[2], &[0.5, -1.5]));
        let y = g.linear(x, w0, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.5, 0.5, -1.5]);

        let bad = g.param(Tensor::zeros(&[2, 4]));
        assert!(g.linear(x, bad, b).is_err());
    }

    #[test]
    fn grid_sample_conventions() {
        // features [1, 2, 2, 3]: channel 0 = 0..6, channel 1 = 10..16
        let data: Vec<f64> = (0..6).map(f64::from).chain((10..16).map(f64::from)).collect();
        let mut g = Graph::new();
        let f = g.param(t(&[1, 2, 2, 3], &data));
        let coords = t(&[1, 3, 2], &[2.0, 1.0, 0.5, 0.0, -10.0, -10.0]);
        let y = g.grid_sample_bilinear(f, &coords).unwrap();
        let out = g.value(y).data();
        // (i=2, j=1) -> features[:, :, 1, 2]
        assert_eq!(&out[0..2], &[5.0, 15.0]);
        // midpoint of (0,0) and (1,0)
        assert_eq!(&out[2..4], &[0.5, 10.5]);
        assert_eq!(&out[4..6], &[0.0, 0.0]);

        let nan = t(&[1, 1, 2], &[f64::NAN, 0.0]);
        assert!(g.grid_sample_bilinear(f, &nan).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let p = permute_data(&data, &[2, 3, 4], &[2, 0, 1]);
        assert_eq!(p[1], 4.0);
        assert_eq!(p[3], 12.0);
        assert_eq!(permute_data(&p, &[4, 2, 3], &[1, 2, 0]), data);
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], &[1.0, 5.0, 2.0, 4.0, 0.0, 9.0]));
        let m = g.max_axis(x, 0).unwrap();
        assert_eq!(g.value(m).data(), &[4.0, 5.0, 9.0]);
        let a = g.mean_axis(x, 1).unwrap();
        assert_eq!(g.value(a).data(), &[8.0 / 3.0, 13.0 / 3.0]);
        assert!(g.max_axis(x, 2).is_err());
    }

    #[test]
    fn pooling_requires_even_extent() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 4]));
        assert!(g.max_pool2d(x).is_err());
        assert!(g.avg_pool2d(x).is_err());
    }
}
