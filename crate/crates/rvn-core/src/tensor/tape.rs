//! Wengert tape: operations append nodes during the forward pass, `backward`
//! replays them in strict reverse append order.
//!
//! Values live in tape slots; [`Var`] is a cheap handle. A node is only
//! recorded when its output requires a gradient, so inference-mode forwards
//! leave the node list empty. Gradients accumulate additively: calling
//! `backward` twice without clearing doubles leaf gradients.

use super::conv;
use super::{conv_out_extent, conv_transpose_out_extent, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

struct Slot<T> {
    value: Tensor<T>,
    requires_grad: bool,
    /// Produced by a node (vs. a leaf); its gradient is transient per backward pass.
    from_node: bool,
}

/// Extension point for domain operations recorded on the tape (e.g. the
/// multi-view feature pooling in the fusion module).
pub trait CustomOp<T: Scalar>: std::fmt::Debug {
    /// Per-input gradient buffers for the given output gradient. An empty
    /// vector means "no gradient for this input".
    fn backward(&self, out_grad: &[T]) -> Vec<Vec<T>>;
}

enum Node<T: Scalar> {
    Conv3d { x: Var, w: Var, b: Var, out: Var, stride: [usize; 3], pad: [usize; 3] },
    ConvTranspose3d { x: Var, w: Var, b: Var, out: Var, stride: [usize; 3], pad: [usize; 3] },
    Conv2d { x: Var, w: Var, b: Var, out: Var, stride: [usize; 2], pad: [usize; 2] },
    InstanceNorm { x: Var, out: Var, inv_std: Vec<T>, grad_spatial: usize },
    Relu { x: Var, out: Var },
    Sigmoid { x: Var, out: Var },
    Linear { x: Var, w: Var, b: Var, out: Var },
    ConcatChannels { a: Var, b: Var, out: Var, split: usize },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Scale { x: Var, c: T, out: Var },
    SumAll { x: Var, out: Var },
    MeanAll { x: Var, out: Var },
    BceWithLogits { logits: Var, target: Tensor<T>, out: Var },
    CrossEntropy { logits: Var, label: usize, out: Var },
    Huber { pred: Var, target: Tensor<T>, out: Var, threshold: T },
    Crop3d { x: Var, lo: [usize; 3], out: Var },
    SliceChannels { x: Var, start: usize, out: Var },
    Reshape { x: Var, out: Var },
    Gather { x: Var, idx: Vec<usize>, out: Var },
    RoiMaxPool { x: Var, argmax: Vec<usize>, out: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>>, out: Var },
}

/// Reverse-mode differentiation tape. Single-threaded by design; independent
/// tapes may run on independent threads.
pub struct Tape<T: Scalar> {
    slots: Vec<Slot<T>>,
    grads: Vec<Option<Vec<T>>>,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { slots: Vec::new(), grads: Vec::new(), nodes: Vec::new() }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Put a tensor on the tape as a leaf.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.slots.push(Slot { value, requires_grad, from_node: false });
        self.grads.push(None);
        Var(self.slots.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.slots[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.slots[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    fn push_slot(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.slots.push(Slot { value, requires_grad, from_node: true });
        self.grads.push(None);
        Var(self.slots.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.slots[v.0].requires_grad)
    }

    // ---- operations ----

    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let (xs, ws, bs) =
            (self.value(x).shape().to_vec(), self.value(w).shape().to_vec(), self.value(b).shape());
        if xs.len() != 4 || ws.len() != 5 {
            return Err(Error::Shape(format!("conv3d wants x[C,D,H,W], w[O,I,k,k,k]; got x{xs:?} w{ws:?}")));
        }
        if ws[1] != xs[0] {
            return Err(Error::Shape(format!(
                "conv3d input channels {} do not match weight input channels {}",
                xs[0], ws[1]
            )));
        }
        if bs != [ws[0]] {
            return Err(Error::Shape(format!("conv3d bias shape {bs:?} wants [{}]", ws[0])));
        }
        let k = [ws[2], ws[3], ws[4]];
        let xd = [xs[1], xs[2], xs[3]];
        let mut yd = [0usize; 3];
        for i in 0..3 {
            yd[i] = conv_out_extent(xd[i], k[i], stride[i], pad[i])?;
        }
        let (oc, ic) = (ws[0], ws[1]);
        let yvol = yd[0] * yd[1] * yd[2];
        let mut y = vec![T::zero(); oc * yvol];
        for (o, chunk) in y.chunks_mut(yvol).enumerate() {
            let bv = self.value(b).data()[o];
            chunk.fill(bv);
        }
        conv::gather3(
            self.value(x).data(),
            ic,
            xd,
            self.value(w).data(),
            oc,
            k,
            stride,
            pad,
            &mut y,
            yd,
        );
        let rg = self.any_grad(&[x, w, b]);
        let out = self.push_slot(Tensor::new(&[oc, yd[0], yd[1], yd[2]], y)?, rg);
        if rg {
            self.nodes.push(Node::Conv3d { x, w, b, out, stride, pad });
        }
        Ok(out)
    }

    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let (xs, ws, bs) =
            (self.value(x).shape().to_vec(), self.value(w).shape().to_vec(), self.value(b).shape());
        if xs.len() != 4 || ws.len() != 5 {
            return Err(Error::Shape(format!(
                "conv_transpose3d wants x[C,D,H,W], w[I,O,k,k,k]; got x{xs:?} w{ws:?}"
            )));
        }
        if ws[0] != xs[0] {
            return Err(Error::Shape(format!(
                "conv_transpose3d input channels {} do not match weight input channels {}",
                xs[0], ws[0]
            )));
        }
        if bs != [ws[1]] {
            return Err(Error::Shape(format!("conv_transpose3d bias shape {bs:?} wants [{}]", ws[1])));
        }
        let k = [ws[2], ws[3], ws[4]];
        let xd = [xs[1], xs[2], xs[3]];
        let mut yd = [0usize; 3];
        for i in 0..3 {
            yd[i] = conv_transpose_out_extent(xd[i], k[i], stride[i], pad[i])?;
        }
        let (ic, oc) = (ws[0], ws[1]);
        let yvol = yd[0] * yd[1] * yd[2];
        let mut y = vec![T::zero(); oc * yvol];
        for (o, chunk) in y.chunks_mut(yvol).enumerate() {
            let bv = self.value(b).data()[o];
            chunk.fill(bv);
        }
        // Scatter with the weight read as a conv weight [A=ic, B=oc, k]:
        // y[o, q*s + k - p] += w[i,o,k] * x[i, q].
        conv::scatter3(
            self.value(x).data(),
            ic,
            xd,
            self.value(w).data(),
            oc,
            k,
            stride,
            pad,
            &mut y,
            yd,
        );
        let rg = self.any_grad(&[x, w, b]);
        let out = self.push_slot(Tensor::new(&[oc, yd[0], yd[1], yd[2]], y)?, rg);
        if rg {
            self.nodes.push(Node::ConvTranspose3d { x, w, b, out, stride, pad });
        }
        Ok(out)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: [usize; 2],
        pad: [usize; 2],
    ) -> Result<Var> {
        let (xs, ws, bs) =
            (self.value(x).shape().to_vec(), self.value(w).shape().to_vec(), self.value(b).shape());
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::Shape(format!("conv2d wants x[C,H,W], w[O,I,k,k]; got x{xs:?} w{ws:?}")));
        }
        if ws[1] != xs[0] {
            return Err(Error::Shape(format!(
                "conv2d input channels {} do not match weight input channels {}",
                xs[0], ws[1]
            )));
        }
        if bs != [ws[0]] {
            return Err(Error::Shape(format!("conv2d bias shape {bs:?} wants [{}]", ws[0])));
        }
        let k = [ws[2], ws[3]];
        let xd = [xs[1], xs[2]];
        let mut yd = [0usize; 2];
        for i in 0..2 {
            yd[i] = conv_out_extent(xd[i], k[i], stride[i], pad[i])?;
        }
        let (oc, ic) = (ws[0], ws[1]);
        let yvol = yd[0] * yd[1];
        let mut y = vec![T::zero(); oc * yvol];
        for (o, chunk) in y.chunks_mut(yvol).enumerate() {
            let bv = self.value(b).data()[o];
            chunk.fill(bv);
        }
        conv::gather2(
            self.value(x).data(),
            ic,
            xd,
            self.value(w).data(),
            oc,
            k,
            stride,
            pad,
            &mut y,
            yd,
        );
        let rg = self.any_grad(&[x, w, b]);
        let out = self.push_slot(Tensor::new(&[oc, yd[0], yd[1]], y)?, rg);
        if rg {
            self.nodes.push(Node::Conv2d { x, w, b, out, stride, pad });
        }
        Ok(out)
    }

    /// Per-channel normalization over all non-channel dimensions, no affine.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::Shape(format!("instance_norm wants [C, spatial...]; got {xs:?}")));
        }
        let c = xs[0];
        let n: usize = xs[1..].iter().product();
        if n == 0 {
            return Err(Error::Shape("instance_norm needs at least one spatial element".into()));
        }
        let nf = T::of_usize(n);
        let xv = self.value(x).data();
        let mut y = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let xs_ch = &xv[ch * n..(ch + 1) * n];
            let mean = xs_ch.iter().copied().sum::<T>() / nf;
            let var = xs_ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[ch] = inv;
            for (o, &i) in y[ch * n..(ch + 1) * n].iter_mut().zip(xs_ch.iter()) {
                *o = (i - mean) * inv;
            }
        }
        let rg = self.requires_grad(x);
        let out = self.push_slot(Tensor::new(&xs, y)?, rg);
        if rg {
            self.nodes.push(Node::InstanceNorm { x, out, inv_std, grad_spatial: n });
        }
        Ok(out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.requires_grad(x);
        let out = self.push_slot(y, rg);
        if rg {
            self.nodes.push(Node::Relu { x, out });
        }
        out
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(stable_sigmoid);
        let rg = self.requires_grad(x);
        let out = self.push_slot(y, rg);
        if rg {
            self.nodes.push(Node::Sigmoid { x, out });
        }
        out
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) =
            (self.value(x).shape().to_vec(), self.value(w).shape().to_vec(), self.value(b).shape());
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] || bs != [ws[0]] {
            return Err(Error::Shape(format!(
                "linear wants x[I], w[O,I], b[O]; got x{xs:?} w{ws:?} b{bs:?}"
            )));
        }
        let (o_dim, i_dim) = (ws[0], ws[1]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut y = vec![T::zero(); o_dim];
        for o in 0..o_dim {
            let row = &wv[o * i_dim..(o + 1) * i_dim];
            let mut acc = bv[o];
            for (a, b2) in row.iter().zip(xv.iter()) {
                acc = acc + *a * *b2;
            }
            y[o] = acc;
        }
        let rg = self.any_grad(&[x, w, b]);
        let out = self.push_slot(Tensor::new(&[o_dim], y)?, rg);
        if rg {
            self.nodes.push(Node::Linear { x, w, b, out });
        }
        Ok(out)
    }

    /// Stack `a` then `b` along the channel axis; spatial extents must agree.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != sb.len() || sa.len() < 2 || sa[1..] != sb[1..] {
            return Err(Error::Shape(format!(
                "concat_channels spatial extents differ: {sa:?} vs {sb:?}"
            )));
        }
        let mut shape = sa.clone();
        shape[0] = sa[0] + sb[0];
        let mut y = Vec::with_capacity(self.value(a).numel() + self.value(b).numel());
        y.extend_from_slice(self.value(a).data());
        y.extend_from_slice(self.value(b).data());
        let split = self.value(a).numel();
        let rg = self.any_grad(&[a, b]);
        let out = self.push_slot(Tensor::new(&shape, y)?, rg);
        if rg {
            self.nodes.push(Node::ConcatChannels { a, b, out, split });
        }
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, BinaryKind::Mul)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        kind: BinaryKind,
    ) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "elementwise op shapes differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let y: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &z)| f(x, z))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        let out = self.push_slot(Tensor::new(&shape, y)?, rg);
        if rg {
            self.nodes.push(match kind {
                BinaryKind::Add => Node::Add { a, b, out },
                BinaryKind::Sub => Node::Sub { a, b, out },
                BinaryKind::Mul => Node::Mul { a, b, out },
            });
        }
        Ok(out)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).map(|v| v * c);
        let rg = self.requires_grad(x);
        let out = self.push_slot(y, rg);
        if rg {
            self.nodes.push(Node::Scale { x, c, out });
        }
        out
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.requires_grad(x);
        let out = self.push_slot(Tensor::scalar(s), rg);
        if rg {
            self.nodes.push(Node::SumAll { x, out });
        }
        out
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::of_usize(self.value(x).numel());
        let s: T = self.value(x).data().iter().copied().sum::<T>() / n;
        let rg = self.requires_grad(x);
        let out = self.push_slot(Tensor::scalar(s), rg);
        if rg {
            self.nodes.push(Node::MeanAll { x, out });
        }
        out
    }

    /// Channel-preserving spatial crop of a `[C,D,H,W]` tensor to `[lo, hi)`.
    pub fn crop3d(&mut self, x: Var, lo: [usize; 3], hi: [usize; 3]) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("crop3d wants [C,D,H,W]; got {xs:?}")));
        }
        let xd = [xs[1], xs[2], xs[3]];
        for i in 0..3 {
            if lo[i] >= hi[i] || hi[i] > xd[i] {
                return Err(Error::Shape(format!(
                    "crop bounds [{lo:?}, {hi:?}) invalid for extents {xd:?}"
                )));
            }
        }
        let c = xs[0];
        let od = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        let mut y = Vec::with_capacity(c * od[0] * od[1] * od[2]);
        let xv = self.value(x).data();
        for ch in 0..c {
            let base = ch * xd[0] * xd[1] * xd[2];
            for d in lo[0]..hi[0] {
                for h in lo[1]..hi[1] {
                    let off = base + (d * xd[1] + h) * xd[2] + lo[2];
                    y.extend_from_slice(&xv[off..off + od[2]]);
                }
            }
        }
        let rg = self.requires_grad(x);
        let out = self.push_slot(Tensor::new(&[c, od[0], od[1], od[2]], y)?, rg);
        if rg {
            self.nodes.push(Node::Crop3d { x, lo, out });
        }
        Ok(out)
    }

    /// Contiguous channel block `[start, start+len)`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.is_empty() || start + len > xs[0] || len == 0 {
            return Err(Error::Shape(format!(
                "slice_channels [{start}, {}) invalid for shape {xs:?}",
                start + len
            )));
        }
        let n: usize = xs[1..].iter().product();
        let mut shape = xs.clone();
        shape[0] = len;
        let y = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let rg = self.requires_grad(x);
        let out = self.push_slot(Tensor::new(&shape, y)?, rg);
        if rg {
            self.nodes.push(Node::SliceChannels { x, start, out });
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshaped(shape)?;
        let rg = self.requires_grad(x);
        let out = self.push_slot(y, rg);
        if rg {
            self.nodes.push(Node::Reshape { x, out });
        }
        Ok(out)
    }

    /// y[j] = x.flat[idx[j]]; duplicate indices accumulate on backward.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x).data();
        if idx.is_empty() {
            return Err(Error::Invalid("gather with empty index set".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::Invalid(format!(
                "gather index {bad} out of range for {} elements",
                xv.len()
            )));
        }
        let y: Vec<T> = idx.iter().map(|&i| xv[i]).collect();
        let n = y.len();
        let rg = self.requires_grad(x);
        let out = self.push_slot(Tensor::new(&[n], y)?, rg);
        if rg {
            self.nodes.push(Node::Gather { x, idx, out });
        }
        Ok(out)
    }

    /// Max-pool the spatial region `[lo, hi)` of `x` into `out_dims` bins per
    /// axis. Bin `t` of `T` over an extent `L` covers
    /// `[floor(t*L/T), max(floor((t+1)*L/T), floor(t*L/T)+1))`, so every bin
    /// is nonempty even when `L < T` (bins then overlap).
    pub fn roi_max_pool(
        &mut self,
        x: Var,
        lo: [usize; 3],
        hi: [usize; 3],
        out_dims: [usize; 3],
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("roi_max_pool wants [C,D,H,W]; got {xs:?}")));
        }
        let xd = [xs[1], xs[2], xs[3]];
        for i in 0..3 {
            if lo[i] >= hi[i] || hi[i] > xd[i] {
                return Err(Error::Shape(format!(
                    "roi bounds [{lo:?}, {hi:?}) invalid for extents {xd:?}"
                )));
            }
        }
        let c = xs[0];
        let bins: [Vec<(usize, usize)>; 3] = [
            bin_ranges(lo[0], hi[0], out_dims[0]),
            bin_ranges(lo[1], hi[1], out_dims[1]),
            bin_ranges(lo[2], hi[2], out_dims[2]),
        ];
        let ovol = out_dims[0] * out_dims[1] * out_dims[2];
        let mut y = vec![T::zero(); c * ovol];
        let mut argmax = vec![0usize; c * ovol];
        let xv = self.value(x).data();
        for ch in 0..c {
            let base = ch * xd[0] * xd[1] * xd[2];
            for (bd, &(d0, d1)) in bins[0].iter().enumerate() {
                for (bh, &(h0, h1)) in bins[1].iter().enumerate() {
                    for (bw, &(w0, w1)) in bins[2].iter().enumerate() {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0usize;
                        for d in d0..d1 {
                            for h in h0..h1 {
                                for w in w0..w1 {
                                    let idx = base + (d * xd[1] + h) * xd[2] + w;
                                    if xv[idx] > best {
                                        best = xv[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        let o = ch * ovol + (bd * out_dims[1] + bh) * out_dims[2] + bw;
                        y[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        let out =
            self.push_slot(Tensor::new(&[c, out_dims[0], out_dims[1], out_dims[2]], y)?, rg);
        if rg {
            self.nodes.push(Node::RoiMaxPool { x, argmax, out });
        }
        Ok(out)
    }

    /// Record a domain-specific operation with a precomputed output value.
    pub fn push_custom(
        &mut self,
        inputs: Vec<Var>,
        value: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Var {
        let rg = self.any_grad(&inputs);
        let out = self.push_slot(value, rg);
        if rg {
            self.nodes.push(Node::Custom { inputs, op, out });
        }
        out
    }

    // ---- losses (scalar outputs) ----

    /// Numerically stable binary cross entropy on logits, mean reduction.
    pub fn bce_with_logits(&mut self, logits: Var, target: Tensor<T>) -> Result<Var> {
        if self.value(logits).shape() != target.shape() {
            return Err(Error::Shape(format!(
                "bce_with_logits shapes differ: {:?} vs {:?}",
                self.value(logits).shape(),
                target.shape()
            )));
        }
        if target.data().iter().any(|&t| t < T::zero() || t > T::one()) {
            return Err(Error::Invalid("bce_with_logits target outside [0, 1]".into()));
        }
        let n = T::of_usize(target.numel());
        let mut acc = T::zero();
        for (&x, &t) in self.value(logits).data().iter().zip(target.data().iter()) {
            // max(x,0) - x*t + ln(1 + exp(-|x|))
            let pos = if x > T::zero() { x } else { T::zero() };
            acc = acc + pos - x * t + (T::one() + (-x.abs()).exp()).ln();
        }
        let rg = self.requires_grad(logits);
        let out = self.push_slot(Tensor::scalar(acc / n), rg);
        if rg {
            self.nodes.push(Node::BceWithLogits { logits, target, out });
        }
        Ok(out)
    }

    /// -log softmax(logits)[label], stable log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let k = self.value(logits).numel();
        if self.value(logits).rank() != 1 {
            return Err(Error::Shape("cross_entropy wants a rank-1 logits tensor".into()));
        }
        if label >= k {
            return Err(Error::Invalid(format!("class label {label} out of range 0..{k}")));
        }
        let xv = self.value(logits).data();
        let m = xv.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = xv.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        let rg = self.requires_grad(logits);
        let out = self.push_slot(Tensor::scalar(lse - xv[label]), rg);
        if rg {
            self.nodes.push(Node::CrossEntropy { logits, label, out });
        }
        Ok(out)
    }

    /// Mean of per-element 0.5*d^2 for |d| <= threshold, |d| otherwise,
    /// with d = pred - target.
    pub fn huber(&mut self, pred: Var, target: Tensor<T>, threshold: T) -> Result<Var> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::Shape(format!(
                "huber shapes differ: {:?} vs {:?}",
                self.value(pred).shape(),
                target.shape()
            )));
        }
        let n = T::of_usize(target.numel());
        let half = T::of_f64(0.5);
        let mut acc = T::zero();
        for (&p, &t) in self.value(pred).data().iter().zip(target.data().iter()) {
            let d = p - t;
            acc = acc + if d.abs() <= threshold { half * d * d } else { d.abs() };
        }
        let rg = self.requires_grad(pred);
        let out = self.push_slot(Tensor::scalar(acc / n), rg);
        if rg {
            self.nodes.push(Node::Huber { pred, target, out, threshold });
        }
        Ok(out)
    }

    // ---- backward ----

    /// Populate gradients of every `requires_grad` ancestor of `loss`.
    /// Gradients accumulate: a second call without clearing adds again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss; got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.requires_grad(loss) {
            // Loss does not depend on any differentiable leaf; nothing to do.
            return Ok(());
        }
        // Node-output gradients are transient per pass; leaf gradients
        // accumulate across passes.
        for (g, s) in self.grads.iter_mut().zip(self.slots.iter()) {
            if s.from_node {
                *g = None;
            }
        }
        self.ensure_grad(loss);
        if let Some(g) = self.grads[loss.0].as_mut() {
            g[0] += T::one();
        }
        for i in (0..self.nodes.len()).rev() {
            // Take the node out to appease the borrow checker; put it back after.
            let node = std::mem::replace(&mut self.nodes[i], Node::Reshape { x: Var(0), out: Var(0) });
            self.backward_node(&node);
            self.nodes[i] = node;
        }
        Ok(())
    }

    /// Drop all gradient buffers (leaves included).
    pub fn clear_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn ensure_grad(&mut self, v: Var) {
        if self.grads[v.0].is_none() {
            self.grads[v.0] = Some(vec![T::zero(); self.slots[v.0].value.numel()]);
        }
    }

    fn take_out_grad(&mut self, out: Var) -> Option<Vec<T>> {
        self.grads[out.0].take()
    }

    fn put_back(&mut self, out: Var, g: Vec<T>) {
        self.grads[out.0] = Some(g);
    }

    fn acc_into(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.slots[v.0].requires_grad {
            return;
        }
        self.ensure_grad(v);
        f(self.grads[v.0].as_mut().unwrap());
    }

    fn backward_node(&mut self, node: &Node<T>) {
        match node {
            Node::Conv3d { x, w, b, out, stride, pad } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let xs = self.value(*x).shape().to_vec();
                let ws = self.value(*w).shape().to_vec();
                let os = self.value(*out).shape().to_vec();
                let xd = [xs[1], xs[2], xs[3]];
                let gd = [os[1], os[2], os[3]];
                let k = [ws[2], ws[3], ws[4]];
                let (oc, ic) = (ws[0], ws[1]);
                if self.requires_grad(*x) {
                    let wv = self.value(*w).clone();
                    self.acc_into(*x, |dx| {
                        conv::scatter3(&g, oc, gd, wv.data(), ic, k, *stride, *pad, dx, xd);
                    });
                }
                if self.requires_grad(*w) {
                    let xv = self.value(*x).clone();
                    self.acc_into(*w, |dw| {
                        conv::weight_grad3(xv.data(), ic, xd, &g, oc, gd, k, *stride, *pad, dw);
                    });
                }
                if self.requires_grad(*b) {
                    let gvol = gd[0] * gd[1] * gd[2];
                    self.acc_into(*b, |db| {
                        for o in 0..oc {
                            let mut s = T::zero();
                            for v in &g[o * gvol..(o + 1) * gvol] {
                                s = s + *v;
                            }
                            db[o] += s;
                        }
                    });
                }
                self.put_back(*out, g);
            }
            Node::ConvTranspose3d { x, w, b, out, stride, pad } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let xs = self.value(*x).shape().to_vec();
                let ws = self.value(*w).shape().to_vec();
                let os = self.value(*out).shape().to_vec();
                let xd = [xs[1], xs[2], xs[3]];
                let gd = [os[1], os[2], os[3]];
                let k = [ws[2], ws[3], ws[4]];
                let (ic, oc) = (ws[0], ws[1]);
                if self.requires_grad(*x) {
                    // dx[i,q] = sum_{o,k} w[i,o,k] * g[o, q*s + k - p]: a gather.
                    let wv = self.value(*w).clone();
                    self.acc_into(*x, |dx| {
                        conv::gather3(&g, oc, gd, wv.data(), ic, k, *stride, *pad, dx, xd);
                    });
                }
                if self.requires_grad(*w) {
                    // dw[i,o,k] = sum_q x[i,q] * g[o, q*s + k - p].
                    let xv = self.value(*x).clone();
                    self.acc_into(*w, |dw| {
                        conv::weight_grad3(&g, oc, gd, xv.data(), ic, xd, k, *stride, *pad, dw);
                    });
                }
                if self.requires_grad(*b) {
                    let gvol = gd[0] * gd[1] * gd[2];
                    self.acc_into(*b, |db| {
                        for o in 0..oc {
                            let mut s = T::zero();
                            for v in &g[o * gvol..(o + 1) * gvol] {
                                s = s + *v;
                            }
                            db[o] += s;
                        }
                    });
                }
                self.put_back(*out, g);
            }
            Node::Conv2d { x, w, b, out, stride, pad } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let xs = self.value(*x).shape().to_vec();
                let ws = self.value(*w).shape().to_vec();
                let os = self.value(*out).shape().to_vec();
                let xd = [xs[1], xs[2]];
                let gd = [os[1], os[2]];
                let k = [ws[2], ws[3]];
                let (oc, ic) = (ws[0], ws[1]);
                if self.requires_grad(*x) {
                    let wv = self.value(*w).clone();
                    self.acc_into(*x, |dx| {
                        conv::scatter2(&g, oc, gd, wv.data(), ic, k, *stride, *pad, dx, xd);
                    });
                }
                if self.requires_grad(*w) {
                    let xv = self.value(*x).clone();
                    self.acc_into(*w, |dw| {
                        conv::weight_grad2(xv.data(), ic, xd, &g, oc, gd, k, *stride, *pad, dw);
                    });
                }
                if self.requires_grad(*b) {
                    let gvol = gd[0] * gd[1];
                    self.acc_into(*b, |db| {
                        for o in 0..oc {
                            let mut s = T::zero();
                            for v in &g[o * gvol..(o + 1) * gvol] {
                                s = s + *v;
                            }
                            db[o] += s;
                        }
                    });
                }
                self.put_back(*out, g);
            }
            Node::InstanceNorm { x, out, inv_std, grad_spatial } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let n = *grad_spatial;
                let nf = T::of_usize(n);
                let yv = self.value(*out).clone();
                self.acc_into(*x, |dx| {
                    for (ch, &inv) in inv_std.iter().enumerate() {
                        let gs = &g[ch * n..(ch + 1) * n];
                        let ys = &yv.data()[ch * n..(ch + 1) * n];
                        let g_mean = gs.iter().copied().sum::<T>() / nf;
                        let gy_mean =
                            gs.iter().zip(ys.iter()).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        for ((d, &gv), &yval) in
                            dx[ch * n..(ch + 1) * n].iter_mut().zip(gs.iter()).zip(ys.iter())
                        {
                            *d += inv * (gv - g_mean - yval * gy_mean);
                        }
                    }
                });
                self.put_back(*out, g);
            }
            Node::Relu { x, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let xv = self.value(*x).clone();
                self.acc_into(*x, |dx| {
                    for ((d, &gv), &iv) in dx.iter_mut().zip(g.iter()).zip(xv.data().iter()) {
                        if iv > T::zero() {
                            *d += gv;
                        }
                    }
                });
                self.put_back(*out, g);
            }
            Node::Sigmoid { x, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let yv = self.value(*out).clone();
                self.acc_into(*x, |dx| {
                    for ((d, &gv), &yval) in dx.iter_mut().zip(g.iter()).zip(yv.data().iter()) {
                        *d += gv * yval * (T::one() - yval);
                    }
                });
                self.put_back(*out, g);
            }
            Node::Linear { x, w, b, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let (o_dim, i_dim) = (self.value(*w).dim(0), self.value(*w).dim(1));
                if self.requires_grad(*x) {
                    let wv = self.value(*w).clone();
                    self.acc_into(*x, |dx| {
                        for o in 0..o_dim {
                            let row = &wv.data()[o * i_dim..(o + 1) * i_dim];
                            let gv = g[o];
                            for (d, &wv2) in dx.iter_mut().zip(row.iter()) {
                                *d += gv * wv2;
                            }
                        }
                    });
                }
                if self.requires_grad(*w) {
                    let xv = self.value(*x).clone();
                    self.acc_into(*w, |dw| {
                        for o in 0..o_dim {
                            let gv = g[o];
                            for (d, &iv) in
                                dw[o * i_dim..(o + 1) * i_dim].iter_mut().zip(xv.data().iter())
                            {
                                *d += gv * iv;
                            }
                        }
                    });
                }
                if self.requires_grad(*b) {
                    self.acc_into(*b, |db| {
                        for (d, &gv) in db.iter_mut().zip(g.iter()) {
                            *d += gv;
                        }
                    });
                }
                self.put_back(*out, g);
            }
            Node::ConcatChannels { a, b, out, split } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                self.acc_into(*a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g[..*split].iter()) {
                        *d += gv;
                    }
                });
                self.acc_into(*b, |db| {
                    for (d, &gv) in db.iter_mut().zip(g[*split..].iter()) {
                        *d += gv;
                    }
                });
                self.put_back(*out, g);
            }
            Node::Add { a, b, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                self.acc_into(*a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g.iter()) {
                        *d += gv;
                    }
                });
                self.acc_into(*b, |db| {
                    for (d, &gv) in db.iter_mut().zip(g.iter()) {
                        *d += gv;
                    }
                });
                self.put_back(*out, g);
            }
            Node::Sub { a, b, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                self.acc_into(*a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g.iter()) {
                        *d += gv;
                    }
                });
                self.acc_into(*b, |db| {
                    for (d, &gv) in db.iter_mut().zip(g.iter()) {
                        *d -= gv;
                    }
                });
                self.put_back(*out, g);
            }
            Node::Mul { a, b, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let av = self.value(*a).clone();
                let bv = self.value(*b).clone();
                self.acc_into(*a, |da| {
                    for ((d, &gv), &other) in da.iter_mut().zip(g.iter()).zip(bv.data().iter()) {
                        *d += gv * other;
                    }
                });
                self.acc_into(*b, |db| {
                    for ((d, &gv), &other) in db.iter_mut().zip(g.iter()).zip(av.data().iter()) {
                        *d += gv * other;
                    }
                });
                self.put_back(*out, g);
            }
            Node::Scale { x, c, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                self.acc_into(*x, |dx| {
                    for (d, &gv) in dx.iter_mut().zip(g.iter()) {
                        *d += gv * *c;
                    }
                });
                self.put_back(*out, g);
            }
            Node::SumAll { x, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let gv = g[0];
                self.acc_into(*x, |dx| {
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                });
                self.put_back(*out, g);
            }
            Node::MeanAll { x, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let n = T::of_usize(self.value(*x).numel());
                let gv = g[0] / n;
                self.acc_into(*x, |dx| {
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                });
                self.put_back(*out, g);
            }
            Node::BceWithLogits { logits, target, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let n = T::of_usize(target.numel());
                let gv = g[0] / n;
                let xv = self.value(*logits).clone();
                self.acc_into(*logits, |dx| {
                    for ((d, &x), &t) in dx.iter_mut().zip(xv.data().iter()).zip(target.iter()) {
                        *d += gv * (stable_sigmoid(x) - t);
                    }
                });
                self.put_back(*out, g);
            }
            Node::CrossEntropy { logits, label, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let gv = g[0];
                let xv = self.value(*logits).clone();
                let m = xv.data().iter().copied().fold(T::neg_infinity(), T::max);
                let denom: T = xv.data().iter().map(|&v| (v - m).exp()).sum();
                self.acc_into(*logits, |dx| {
                    for (j, (d, &x)) in dx.iter_mut().zip(xv.data().iter()).enumerate() {
                        let p = (x - m).exp() / denom;
                        let t = if j == *label { T::one() } else { T::zero() };
                        *d += gv * (p - t);
                    }
                });
                self.put_back(*out, g);
            }
            Node::Huber { pred, target, out, threshold } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let n = T::of_usize(target.numel());
                let gv = g[0] / n;
                let pv = self.value(*pred).clone();
                let thr = *threshold;
                self.acc_into(*pred, |dx| {
                    for ((d, &p), &t) in dx.iter_mut().zip(pv.data().iter()).zip(target.iter()) {
                        let diff = p - t;
                        let gd = if diff.abs() <= thr { diff } else { diff.signum() };
                        *d += gv * gd;
                    }
                });
                self.put_back(*out, g);
            }
            Node::Crop3d { x, lo, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let xs = self.value(*x).shape().to_vec();
                let os = self.value(*out).shape().to_vec();
                let xd = [xs[1], xs[2], xs[3]];
                let od = [os[1], os[2], os[3]];
                let c = xs[0];
                self.acc_into(*x, |dx| {
                    let mut src = 0usize;
                    for ch in 0..c {
                        let base = ch * xd[0] * xd[1] * xd[2];
                        for d in 0..od[0] {
                            for h in 0..od[1] {
                                let off = base + ((d + lo[0]) * xd[1] + h + lo[1]) * xd[2] + lo[2];
                                for w in 0..od[2] {
                                    dx[off + w] += g[src];
                                    src += 1;
                                }
                            }
                        }
                    }
                });
                self.put_back(*out, g);
            }
            Node::SliceChannels { x, start, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let n: usize = self.value(*x).shape()[1..].iter().product();
                let off = start * n;
                self.acc_into(*x, |dx| {
                    for (d, &gv) in dx[off..off + g.len()].iter_mut().zip(g.iter()) {
                        *d += gv;
                    }
                });
                self.put_back(*out, g);
            }
            Node::Reshape { x, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                self.acc_into(*x, |dx| {
                    for (d, &gv) in dx.iter_mut().zip(g.iter()) {
                        *d += gv;
                    }
                });
                self.put_back(*out, g);
            }
            Node::Gather { x, idx, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                self.acc_into(*x, |dx| {
                    for (&i, &gv) in idx.iter().zip(g.iter()) {
                        dx[i] += gv;
                    }
                });
                self.put_back(*out, g);
            }
            Node::RoiMaxPool { x, argmax, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                self.acc_into(*x, |dx| {
                    for (&src, &gv) in argmax.iter().zip(g.iter()) {
                        dx[src] += gv;
                    }
                });
                self.put_back(*out, g);
            }
            Node::Custom { inputs, op, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let input_grads = op.backward(&g);
                debug_assert_eq!(input_grads.len(), inputs.len());
                for (v, ig) in inputs.iter().zip(input_grads.into_iter()) {
                    if ig.is_empty() {
                        continue;
                    }
                    self.acc_into(*v, |dv| {
                        for (d, gv) in dv.iter_mut().zip(ig.into_iter()) {
                            *d += gv;
                        }
                    });
                }
                self.put_back(*out, g);
            }
        }
    }
}

enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Sigmoid with exp branching on sign so it never overflows.
pub fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Bin t of `n_bins` over `[lo, hi)`: nonempty by construction.
fn bin_ranges(lo: usize, hi: usize, n_bins: usize) -> Vec<(usize, usize)> {
    let len = hi - lo;
    (0..n_bins)
        .map(|t| {
            let a = t * len / n_bins;
            let b = ((t + 1) * len / n_bins).max(a + 1).min(len.max(a + 1));
            (lo + a, (lo + b).min(hi).max(lo + a + 1))
        })
        .collect()
}
