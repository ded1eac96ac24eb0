//! Reverse-mode tape.
//!
//! Every node stores its forward value. `backward` walks the tape once in
//! reverse and only visits nodes that depend on a parameter leaf. Shape errors
//! are programming errors and panic.

use crate::gemm::{gemm, MatRef};
use crate::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose forward value is computed by the caller.
pub trait CustomOp<T: Real> {
    /// Gradients for each input given the output gradient. Entries whose
    /// `needs` flag is false may be `None`.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>>;
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

enum Op<T: Real> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Affine { x: NodeId, scale: f64 },
    Sum(NodeId),
    Mean(NodeId),
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom, cols: Vec<T> },
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
    Reshape(NodeId),
    ConcatChannels(NodeId, NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Custom { inputs: Vec<NodeId>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, or zeros of its shape when it does not reach the output.
    pub fn wrt(&self, graph: &Graph<T>, id: NodeId) -> Tensor<T> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => graph.value(id).zeros_like(),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn any(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].needs_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that is treated as constant.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        let ng = self.any(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        let ng = self.any(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.any(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        let ng = self.any(&[a]);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// `(x + shift) * scale`
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = self.value(x).map(|a| (a + T::from_f64(shift)).scale(scale));
        let ng = self.any(&[x]);
        self.push(v, Op::Affine { x, scale }, ng)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.any(&[x]);
        self.push(v, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let n = t.len().max(1) as f64;
        let v = Tensor::scalar(t.sum().scale(1.0 / n));
        let ng = self.any(&[x]);
        self.push(v, Op::Mean(x), ng)
    }

    /// `x [n, d]`, `w [c, d]`, `b [c]` to `x w^T + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.shape().len(), 2, "linear input must be [n, d]");
        assert_eq!(wv.shape().len(), 2, "linear weight must be [c, d]");
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        let c = wv.shape()[0];
        assert_eq!(wv.shape()[1], d, "linear weight width mismatch");
        let mut out = vec![T::zero(); n * c];
        gemm(n, d, c, MatRef::row_major(xv.data(), d), MatRef::row_major(wv.data(), d).t(), &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), &[c], "linear bias shape mismatch");
            for row in out.chunks_mut(c) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.any(&deps);
        self.push(Tensor::from_vec(&[n, c], out), Op::Linear { x, w, b }, ng)
    }

    /// Stride-1 convolution with zero padding. `x [n, ci, h, w]`, `w [co, ci, k, k]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, pad: usize) -> NodeId {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.shape().len(), 4, "conv input must be [n, c, h, w]");
        assert_eq!(wv.shape().len(), 4, "conv weight must be [co, ci, k, k]");
        let (n, ci, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (co, k) = (wv.shape()[0], wv.shape()[2]);
        assert_eq!(wv.shape()[1], ci, "conv channel mismatch");
        assert_eq!(wv.shape()[3], k, "conv kernel must be square");
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv kernel larger than padded input");
        let geom = ConvGeom { n, ci, h, w: wd, co, k, pad, ho: h + 2 * pad - k + 1, wo: wd + 2 * pad - k + 1 };
        let cols = im2col(xv.data(), &geom);
        let mut tmp = vec![T::zero(); co * geom.cols()];
        gemm(co, geom.rows(), geom.cols(), MatRef::row_major(wv.data(), geom.rows()), MatRef::row_major(&cols, geom.cols()), &mut tmp, false);
        let hw = geom.ho * geom.wo;
        let mut out = vec![T::zero(); n * co * hw];
        let bias = b.map(|b| {
            let bv = self.value(b);
            assert_eq!(bv.shape(), &[co], "conv bias shape mismatch");
            bv.data().to_vec()
        });
        for s in 0..n {
            for o in 0..co {
                let src = &tmp[o * geom.cols() + s * hw..o * geom.cols() + (s + 1) * hw];
                let dst = &mut out[(s * co + o) * hw..(s * co + o + 1) * hw];
                dst.copy_from_slice(src);
                if let Some(bias) = &bias {
                    dst.iter_mut().for_each(|v| *v += bias[o]);
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.any(&deps);
        let keep = if self.needs_grad(w) { cols } else { Vec::new() };
        self.push(Tensor::from_vec(&[n, co, geom.ho, geom.wo], out), Op::Conv2d { x, w, b, geom, cols: keep }, ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| if a.primal() > 0.0 { a } else { T::zero() });
        let ng = self.any(&[x]);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let v = self.value(x).map(|a| if a.primal() > 0.0 { a } else { a.scale(slope) });
        let ng = self.any(&[x]);
        self.push(v, Op::LeakyRelu(x, slope), ng)
    }

    /// 2x2 max pooling with stride 2; odd trailing rows and columns are dropped.
    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.shape().len(), 4, "pool input must be [n, c, h, w]");
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let d = xv.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if d[idx].primal() > d[best].primal() {
                            best = idx;
                        }
                    }
                    argmax.push(best);
                    out.push(d[best]);
                }
            }
        }
        let ng = self.any(&[x]);
        self.push(Tensor::from_vec(&[n, c, ho, wo], out), Op::MaxPool2 { x, argmax }, ng)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(x).clone().reshape(shape).expect("reshape size mismatch");
        let ng = self.any(&[x]);
        self.push(v, Op::Reshape(x), ng)
    }

    /// `[n, c] -> [n, prod(rest)]`
    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let n = v.batch();
        let rest = v.sample_len();
        self.reshape(x, &[n, rest])
    }

    /// Concatenate two `[n, c, h, w]` tensors along channels.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape().len(), 4, "concat input must be [n, c, h, w]");
        let (n, ca, h, w) = (av.shape()[0], av.shape()[1], av.shape()[2], av.shape()[3]);
        let cb = bv.shape()[1];
        assert_eq!(bv.shape(), &[n, cb, h, w], "concat shapes differ outside channels");
        let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
        for s in 0..n {
            out.extend_from_slice(av.sample(s));
            out.extend_from_slice(bv.sample(s));
        }
        let ng = self.any(&[a, b]);
        self.push(Tensor::from_vec(&[n, ca + cb, h, w], out), Op::ConcatChannels(a, b), ng)
    }

    /// Clamp to `[lo, hi]`; the gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(x).map(|a| {
            if a.primal() < lo {
                T::from_f64(lo)
            } else if a.primal() > hi {
                T::from_f64(hi)
            } else {
                a
            }
        });
        let ng = self.any(&[x]);
        self.push(v, Op::Clamp { x, lo, hi }, ng)
    }

    pub fn custom(&mut self, inputs: &[NodeId], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> NodeId {
        let ng = self.any(inputs);
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, ng)
    }

    /// Gradients of `out` (seeded with ones) with respect to every node that needs one.
    pub fn backward(&self, out: NodeId) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[out.0].needs_grad {
            return Grads { grads };
        }
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), T::one()));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let ng = |id: NodeId| self.nodes[id.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if ng(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if ng(*b) {
                    accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if ng(*b) {
                    accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => {
                if ng(*a) {
                    accumulate(grads, *a, g.scale(*s));
                }
            }
            Op::Affine { x, scale } => {
                if ng(*x) {
                    accumulate(grads, *x, g.scale(*scale));
                }
            }
            Op::Sum(x) => {
                if ng(*x) {
                    accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g.item()));
                }
            }
            Op::Mean(x) => {
                if ng(*x) {
                    let xv = self.value(*x);
                    let n = xv.len().max(1) as f64;
                    accumulate(grads, *x, Tensor::full(xv.shape(), g.item().scale(1.0 / n)));
                }
            }
            Op::Linear { x, w, b } => self.linear_backward(*x, *w, *b, g, grads),
            Op::Conv2d { x, w, b, geom, cols } => self.conv_backward(*x, *w, *b, geom, cols, g, grads),
            Op::Relu(x) => {
                if ng(*x) {
                    let gx = g.zip_map(self.value(*x), |gg, a| if a.primal() > 0.0 { gg } else { T::zero() });
                    accumulate(grads, *x, gx);
                }
            }
            Op::LeakyRelu(x, s) => {
                if ng(*x) {
                    let gx = g.zip_map(self.value(*x), |gg, a| if a.primal() > 0.0 { gg } else { gg.scale(*s) });
                    accumulate(grads, *x, gx);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if ng(*x) {
                    let mut gx = self.value(*x).zeros_like();
                    let d = gx.data_mut();
                    for (&idx, &gg) in argmax.iter().zip(g.data()) {
                        d[idx] += gg;
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Reshape(x) => {
                if ng(*x) {
                    let gx = g.clone().reshape(self.value(*x).shape()).expect("reshape");
                    accumulate(grads, *x, gx);
                }
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.value(*a).sample_len(), self.value(*b).sample_len());
                let n = g.batch();
                if ng(*a) {
                    let mut ga = Vec::with_capacity(n * sa);
                    for s in 0..n {
                        ga.extend_from_slice(&g.sample(s)[..sa]);
                    }
                    accumulate(grads, *a, Tensor::from_vec(self.value(*a).shape(), ga));
                }
                if ng(*b) {
                    let mut gb = Vec::with_capacity(n * sb);
                    for s in 0..n {
                        gb.extend_from_slice(&g.sample(s)[sa..]);
                    }
                    accumulate(grads, *b, Tensor::from_vec(self.value(*b).shape(), gb));
                }
            }
            Op::Clamp { x, lo, hi } => {
                if ng(*x) {
                    let gx = g.zip_map(self.value(*x), |gg, a| {
                        let p = a.primal();
                        if p < *lo || p > *hi {
                            T::zero()
                        } else {
                            gg
                        }
                    });
                    accumulate(grads, *x, gx);
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.value(i)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&i| ng(i)).collect();
                let gs = op.backward(&vals, &node.value, g, &needs);
                assert_eq!(gs.len(), inputs.len(), "custom op returned wrong number of gradients");
                for ((&id, gi), need) in inputs.iter().zip(gs).zip(needs) {
                    if let (Some(gi), true) = (gi, need) {
                        assert_eq!(gi.shape(), self.value(id).shape(), "custom op gradient shape mismatch");
                        accumulate(grads, id, gi);
                    }
                }
            }
        }
    }

    fn linear_backward(&self, x: NodeId, w: NodeId, b: Option<NodeId>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        let c = wv.shape()[0];
        if self.needs_grad(x) {
            let mut gx = vec![T::zero(); n * d];
            gemm(n, c, d, MatRef::row_major(g.data(), c), MatRef::row_major(wv.data(), d), &mut gx, false);
            accumulate(grads, x, Tensor::from_vec(&[n, d], gx));
        }
        if self.needs_grad(w) {
            let mut gw = vec![T::zero(); c * d];
            gemm(c, n, d, MatRef::row_major(g.data(), c).t(), MatRef::row_major(xv.data(), d), &mut gw, false);
            accumulate(grads, w, Tensor::from_vec(&[c, d], gw));
        }
        if let Some(b) = b {
            if self.needs_grad(b) {
                let mut gb = vec![T::zero(); c];
                for row in g.data().chunks(c) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(grads, b, Tensor::from_vec(&[c], gb));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(&self, x: NodeId, w: NodeId, b: Option<NodeId>, geom: &ConvGeom, cols: &[T], g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let hw = geom.ho * geom.wo;
        let (co, rows, ncols) = (geom.co, geom.rows(), geom.cols());
        // [n, co, hw] -> [co, n * hw]
        let mut gp = vec![T::zero(); co * ncols];
        for s in 0..geom.n {
            for o in 0..co {
                let src = &g.data()[(s * co + o) * hw..(s * co + o + 1) * hw];
                gp[o * ncols + s * hw..o * ncols + (s + 1) * hw].copy_from_slice(src);
            }
        }
        if self.needs_grad(w) {
            let mut gw = vec![T::zero(); co * rows];
            gemm(co, ncols, rows, MatRef::row_major(&gp, ncols), MatRef::row_major(cols, ncols).t(), &mut gw, false);
            accumulate(grads, w, Tensor::from_vec(self.value(w).shape(), gw));
        }
        if let Some(b) = b {
            if self.needs_grad(b) {
                let gb: Vec<T> = gp
                    .chunks(ncols)
                    .map(|row| {
                        let mut acc = T::zero();
                        for &v in row {
                            acc += v;
                        }
                        acc
                    })
                    .collect();
                accumulate(grads, b, Tensor::from_vec(&[co], gb));
            }
        }
        if self.needs_grad(x) {
            let wv = self.value(w);
            let mut gcols = vec![T::zero(); rows * ncols];
            gemm(rows, co, ncols, MatRef::row_major(wv.data(), rows).t(), MatRef::row_major(&gp, ncols), &mut gcols, false);
            let gx = col2im(&gcols, geom);
            accumulate(grads, x, Tensor::from_vec(self.value(x).shape(), gx));
        }
    }
}

/// Output columns `[lo, hi)` that read inside the input for kernel offset `kk`.
fn valid_span(kk: usize, pad: usize, input: usize, out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kk);
    let hi = (input + pad).saturating_sub(kk).min(out);
    (lo, hi.max(lo))
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.ho * g.wo;
    let ncols = g.cols();
    let mut cols = vec![T::zero(); g.rows() * ncols];
    for s in 0..g.n {
        for c in 0..g.ci {
            let plane = &x[(s * g.ci + c) * g.h * g.w..(s * g.ci + c + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (ylo, yhi) = valid_span(ky, g.pad, g.h, g.ho);
                for kx in 0..g.k {
                    let (xlo, xhi) = valid_span(kx, g.pad, g.w, g.wo);
                    let row = (c * g.k + ky) * g.k + kx;
                    let dst = &mut cols[row * ncols + s * hw..row * ncols + (s + 1) * hw];
                    for oy in ylo..yhi {
                        let src = (oy + ky - g.pad) * g.w + xlo + kx - g.pad;
                        dst[oy * g.wo + xlo..oy * g.wo + xhi].copy_from_slice(&plane[src..src + xhi - xlo]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.ho * g.wo;
    let ncols = g.cols();
    let mut x = vec![T::zero(); g.n * g.ci * g.h * g.w];
    for s in 0..g.n {
        for c in 0..g.ci {
            let base = (s * g.ci + c) * g.h * g.w;
            for ky in 0..g.k {
                let (ylo, yhi) = valid_span(ky, g.pad, g.h, g.ho);
                for kx in 0..g.k {
                    let (xlo, xhi) = valid_span(kx, g.pad, g.w, g.wo);
                    let row = (c * g.k + ky) * g.k + kx;
                    let src = &cols[row * ncols + s * hw..row * ncols + (s + 1) * hw];
                    for oy in ylo..yhi {
                        let d = base + (oy + ky - g.pad) * g.w + xlo + kx - g.pad;
                        for (o, &v) in x[d..d + xhi - xlo].iter_mut().zip(&src[oy * g.wo + xlo..oy * g.wo + xhi]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_direct_sum() {
        let x: Vec<f64> = (0..2 * 2 * 4 * 3).map(|i| ((i * 7 % 11) as f64) / 11.0 - 0.4).collect();
        let w: Vec<f64> = (0..3 * 2 * 3 * 3).map(|i| ((i * 5 % 13) as f64) / 13.0 - 0.5).collect();
        let bias = vec![0.1, -0.2, 0.3];
        let mut g = Graph::<f64>::new();
        let xi = g.constant(Tensor::from_vec(&[2, 2, 4, 3], x.clone()));
        let wi = g.constant(Tensor::from_vec(&[3, 2, 3, 3], w.clone()));
        let bi = g.constant(Tensor::from_vec(&[3], bias.clone()));
        let y = g.conv2d(xi, wi, Some(bi), 1);
        let out = g.value(y);
        assert_eq!(out.shape(), &[2, 3, 4, 3]);
        for s in 0..2 {
            for o in 0..3 {
                for oy in 0..4i64 {
                    for ox in 0..3i64 {
                        let mut acc = bias[o];
                        for c in 0..2 {
                            for ky in 0..3i64 {
                                for kx in 0..3i64 {
                                    let (iy, ix) = (oy + ky - 1, ox + kx - 1);
                                    if (0..4).contains(&iy) && (0..3).contains(&ix) {
                                        acc += x[((s * 2 + c) * 4 + iy as usize) * 3 + ix as usize] * w[((o * 2 + c) * 3 + ky as usize) * 3 + kx as usize];
                                    }
                                }
                            }
                        }
                        let got = out.data()[((s * 3 + o) * 4 + oy as usize) * 3 + ox as usize];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let b = g.param(Tensor::from_vec(&[2], vec![3.0, 4.0]));
        let c = g.mul(a, b);
        let s = g.sum(c);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn pool_routes_to_argmax() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 3.0, 1.0, 3.0]));
        let p = g.max_pool2(x);
        assert_eq!(g.value(p).data(), &[3.0]);
        let s = g.sum(p);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
