//! Eager op tape with reverse-mode gradients.
//!
//! Nodes are appended during the forward pass; inputs of a node always have
//! a smaller index, so backward is a single reverse sweep. Spatial tensors
//! are `[C, H, W]` row-major, vectors `[n]`, scalars `[]`.

use super::{ParamId, ParamStore};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Border handling for convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Clamp coordinates to the edge. Keeps spatially constant inputs
    /// constant through the layer, so border statistics stay native.
    Replicate,
}

pub struct Tape {
    nodes: Vec<Node>,
}

struct Node {
    dims: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv2d { x: NodeId, w: ParamId, b: ParamId, stride: usize, pad: usize, mode: PadMode, col: Vec<f64> },
    Relu { x: NodeId },
    UpNearest { x: NodeId },
    UpBilinear { x: NodeId },
    ResampleAffine { x: NodeId, dy: f64, dx: f64, dst_cell: f64, src_cell: f64 },
    Crop { x: NodeId, r0: usize, c0: usize },
    ConcatCh { a: NodeId, b: NodeId },
    Gap { x: NodeId },
    MaskMul { x: NodeId, mask: Vec<f64> },
    MaskedGap { x: NodeId, mask: Vec<f64>, count: f64 },
    Dense { x: NodeId, w: ParamId, b: ParamId },
    SoftmaxCh { x: NodeId },
    SoftmaxVec { x: NodeId },
    NllMeanCh { p: NodeId, labels: Vec<u8> },
    NllVec { p: NodeId, label: usize },
    Pick { x: NodeId, idx: usize },
    Ln { x: NodeId },
    Square { x: NodeId },
    Affine { terms: Vec<(NodeId, f64)> },
    EntropyVec { p: NodeId },
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].values
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].dims
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].values.len(), 1);
        self.nodes[id].values[0]
    }

    /// Gradient buffer of a node (populated after [`Tape::backward`]).
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].grad
    }

    fn push(&mut self, dims: Vec<usize>, values: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { dims, values, grad: Vec::new(), op });
        self.nodes.len() - 1
    }

    fn chw(&self, id: NodeId) -> (usize, usize, usize) {
        let d = &self.nodes[id].dims;
        assert_eq!(d.len(), 3, "expected [C,H,W] node, got {d:?}");
        (d[0], d[1], d[2])
    }

    pub fn input(&mut self, dims: Vec<usize>, values: Vec<f64>) -> NodeId {
        debug_assert_eq!(dims.iter().product::<usize>(), values.len());
        self.push(dims, values, Op::Leaf)
    }

    pub fn zeros(&mut self, dims: Vec<usize>) -> NodeId {
        let n = dims.iter().product();
        self.push(dims, vec![0.0; n], Op::Leaf)
    }

    pub fn input_raster(&mut self, raster: &crate::tiling::Raster) -> NodeId {
        self.input(vec![raster.channels, raster.height, raster.width], raster.data.clone())
    }

    /// Raster input shifted to `[-0.5, 0.5]`. Networks center their pixel
    /// inputs so that first-layer pre-activations are sign-balanced.
    pub fn input_raster_centered(&mut self, raster: &crate::tiling::Raster) -> NodeId {
        let values = raster.data.iter().map(|v| v - 0.5).collect();
        self.input(vec![raster.channels, raster.height, raster.width], values)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let t = &store.get(id).tensor;
        self.push(t.dims.clone(), t.values.clone(), Op::Param(id))
    }

    /// 2-D convolution over `[C,H,W]` with kernel `[Co,Ci,kh,kw]`, padding
    /// `pad` (zero-filled or edge-replicated), square stride.
    pub fn conv2d(
        &mut self,
        store: &ParamStore,
        x: NodeId,
        w: ParamId,
        b: ParamId,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> NodeId {
        let (ci, h, wd) = self.chw(x);
        let wt = &store.get(w).tensor;
        assert_eq!(wt.dims.len(), 4, "conv weight must be [Co,Ci,kh,kw]");
        let (co, wci, kh, kw) = (wt.dims[0], wt.dims[1], wt.dims[2], wt.dims[3]);
        assert_eq!(wci, ci, "conv input channels mismatch");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv kernel larger than padded input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let ckk = ci * kh * kw;
        let positions = ho * wo;
        let mut col = vec![0.0; ckk * positions];
        im2col(&self.nodes[x].values, ci, h, wd, kh, kw, stride, pad, mode, ho, wo, &mut col);
        let mut out = vec![0.0; co * positions];
        mm_nn(co, ckk, positions, &wt.values, &col, &mut out);
        let bias = &store.get(b).tensor.values;
        for oc in 0..co {
            let bv = bias[oc];
            for v in &mut out[oc * positions..(oc + 1) * positions] {
                *v += bv;
            }
        }
        self.push(vec![co, ho, wo], out, Op::Conv2d { x, w, b, stride, pad, mode, col })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let values: Vec<f64> = self.nodes[x].values.iter().map(|&v| v.max(0.0)).collect();
        let dims = self.nodes[x].dims.clone();
        self.push(dims, values, Op::Relu { x })
    }

    /// Nearest-neighbor upsample of `[C,H,W]` to `[C,oh,ow]`.
    pub fn upsample_nearest(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let (c, h, w) = self.chw(x);
        let xv = &self.nodes[x].values;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for r in 0..oh {
                let sr = r * h / oh;
                for cc in 0..ow {
                    let sc = cc * w / ow;
                    out[(ch * oh + r) * ow + cc] = xv[(ch * h + sr) * w + sc];
                }
            }
        }
        self.push(vec![c, oh, ow], out, Op::UpNearest { x })
    }

    /// Bilinear upsample with half-pixel centers and edge clamping. Output
    /// values are convex combinations of inputs, so per-pixel simplex
    /// structure (e.g. probabilities summing to 1) is preserved.
    pub fn upsample_bilinear(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let (c, h, w) = self.chw(x);
        let xv = &self.nodes[x].values;
        let mut out = vec![0.0; c * oh * ow];
        for r in 0..oh {
            let (r0, r1, tr) = bilinear_axis(r, h, oh);
            for cc in 0..ow {
                let (c0, c1, tc) = bilinear_axis(cc, w, ow);
                for ch in 0..c {
                    let base = ch * h;
                    let v = (1.0 - tr) * (1.0 - tc) * xv[(base + r0) * w + c0]
                        + (1.0 - tr) * tc * xv[(base + r0) * w + c1]
                        + tr * (1.0 - tc) * xv[(base + r1) * w + c0]
                        + tr * tc * xv[(base + r1) * w + c1];
                    out[(ch * oh + r) * ow + cc] = v;
                }
            }
        }
        self.push(vec![c, oh, ow], out, Op::UpBilinear { x })
    }

    /// Geo-registered bilinear resampling: output cell `i` covers
    /// `dst_cell` source pixels starting `dy` pixels after the input's
    /// footprint origin, while each input cell covers `src_cell` source
    /// pixels. Sampling happens at output cell centers, so feature maps
    /// with different footprints concatenate in true alignment.
    pub fn resample_affine(
        &mut self,
        x: NodeId,
        oh: usize,
        ow: usize,
        dy: f64,
        dx: f64,
        dst_cell: f64,
        src_cell: f64,
    ) -> NodeId {
        let (c, h, w) = self.chw(x);
        let xv = &self.nodes[x].values;
        let mut out = vec![0.0; c * oh * ow];
        for r in 0..oh {
            let (r0, r1, tr) = affine_axis(r, dy, dst_cell, src_cell, h);
            for cc in 0..ow {
                let (c0, c1, tc) = affine_axis(cc, dx, dst_cell, src_cell, w);
                for ch in 0..c {
                    let base = ch * h;
                    let v = (1.0 - tr) * (1.0 - tc) * xv[(base + r0) * w + c0]
                        + (1.0 - tr) * tc * xv[(base + r0) * w + c1]
                        + tr * (1.0 - tc) * xv[(base + r1) * w + c0]
                        + tr * tc * xv[(base + r1) * w + c1];
                    out[(ch * oh + r) * ow + cc] = v;
                }
            }
        }
        self.push(vec![c, oh, ow], out, Op::ResampleAffine { x, dy, dx, dst_cell, src_cell })
    }

    /// Spatial crop `[C, ch, cw]` at `(r0, c0)`.
    pub fn crop(&mut self, x: NodeId, r0: usize, c0: usize, ch: usize, cw: usize) -> Result<NodeId> {
        let (c, h, w) = self.chw(x);
        if ch == 0 || cw == 0 || r0 + ch > h || c0 + cw > w {
            return Err(Error::Geometry(format!(
                "crop ({r0},{c0}) {ch}x{cw} outside feature map {h}x{w}"
            )));
        }
        let xv = &self.nodes[x].values;
        let mut out = vec![0.0; c * ch * cw];
        for chan in 0..c {
            for r in 0..ch {
                let src = (chan * h + r0 + r) * w + c0;
                let dst = (chan * ch + r) * cw;
                out[dst..dst + cw].copy_from_slice(&xv[src..src + cw]);
            }
        }
        Ok(self.push(vec![c, ch, cw], out, Op::Crop { x, r0, c0 }))
    }

    /// Channel concatenation of two `[C,H,W]` nodes with equal spatial dims.
    pub fn concat_ch(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ca, h, w) = self.chw(a);
        let (cb, hb, wb) = self.chw(b);
        assert_eq!((h, w), (hb, wb), "concat spatial dims mismatch");
        let mut out = Vec::with_capacity((ca + cb) * h * w);
        out.extend_from_slice(&self.nodes[a].values);
        out.extend_from_slice(&self.nodes[b].values);
        self.push(vec![ca + cb, h, w], out, Op::ConcatCh { a, b })
    }

    /// Global average pooling `[C,H,W] -> [C]`.
    pub fn gap(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.chw(x);
        let plane = h * w;
        let xv = &self.nodes[x].values;
        let out: Vec<f64> = (0..c)
            .map(|ch| xv[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        self.push(vec![c], out, Op::Gap { x })
    }

    /// Zero the feature map outside `mask` (1 keeps, 0 clears), broadcast
    /// over channels. The mask carries no gradient.
    pub fn mask_mul(&mut self, x: NodeId, mask: &[f64]) -> NodeId {
        let (c, h, w) = self.chw(x);
        assert_eq!(mask.len(), h * w, "mask size mismatch");
        let xv = &self.nodes[x].values;
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            let base = ch * h * w;
            for (i, &m) in mask.iter().enumerate() {
                out[base + i] = xv[base + i] * m;
            }
        }
        self.push(vec![c, h, w], out, Op::MaskMul { x, mask: mask.to_vec() })
    }

    /// Average pooling restricted to masked positions: sums over cells where
    /// `mask != 0` and divides by the masked count, not the total area.
    pub fn masked_gap(&mut self, x: NodeId, mask: &[f64]) -> Result<NodeId> {
        let (c, h, w) = self.chw(x);
        assert_eq!(mask.len(), h * w, "mask size mismatch");
        let count = mask.iter().filter(|&&m| m != 0.0).count() as f64;
        if count == 0.0 {
            return Err(Error::Geometry("masked pooling over an empty mask".into()));
        }
        let xv = &self.nodes[x].values;
        let mut out = vec![0.0; c];
        for ch in 0..c {
            let base = ch * h * w;
            let mut acc = 0.0;
            for (i, &m) in mask.iter().enumerate() {
                if m != 0.0 {
                    acc += xv[base + i];
                }
            }
            out[ch] = acc / count;
        }
        Ok(self.push(vec![c], out, Op::MaskedGap { x, mask: mask.to_vec(), count }))
    }

    /// Fully connected layer `[n] -> [m]` with weight `[m, n]`.
    pub fn dense(&mut self, store: &ParamStore, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let n = self.nodes[x].values.len();
        let wt = &store.get(w).tensor;
        assert_eq!(wt.dims.len(), 2, "dense weight must be [m,n]");
        let (m, wn) = (wt.dims[0], wt.dims[1]);
        assert_eq!(wn, n, "dense input size mismatch");
        let bias = &store.get(b).tensor.values;
        let xv = &self.nodes[x].values;
        let out: Vec<f64> = (0..m)
            .map(|i| {
                let row = &wt.values[i * n..(i + 1) * n];
                row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>() + bias[i]
            })
            .collect();
        self.push(vec![m], out, Op::Dense { x, w, b })
    }

    /// Per-position softmax over the channel axis of `[K,H,W]`.
    pub fn softmax_ch(&mut self, x: NodeId) -> NodeId {
        let (k, h, w) = self.chw(x);
        let plane = h * w;
        let xv = &self.nodes[x].values;
        let mut out = vec![0.0; k * plane];
        for pos in 0..plane {
            let mut mx = f64::NEG_INFINITY;
            for c in 0..k {
                mx = mx.max(xv[c * plane + pos]);
            }
            let mut z = 0.0;
            for c in 0..k {
                let e = (xv[c * plane + pos] - mx).exp();
                out[c * plane + pos] = e;
                z += e;
            }
            for c in 0..k {
                out[c * plane + pos] /= z;
            }
        }
        self.push(vec![k, h, w], out, Op::SoftmaxCh { x })
    }

    /// Softmax over a vector.
    pub fn softmax_vec(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].values;
        let mx = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xv.iter().map(|&v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let dims = self.nodes[x].dims.clone();
        self.push(dims, out, Op::SoftmaxVec { x })
    }

    /// Mean negative log-likelihood of per-pixel probabilities `[K,H,W]`
    /// against labels `[H*W]`: `-(1/HW) * sum ln p[y]`.
    pub fn nll_mean_ch(&mut self, p: NodeId, labels: &[u8]) -> NodeId {
        let (k, h, w) = self.chw(p);
        let plane = h * w;
        assert_eq!(labels.len(), plane, "label count mismatch");
        let pv = &self.nodes[p].values;
        let mut acc = 0.0;
        for (pos, &y) in labels.iter().enumerate() {
            debug_assert!((y as usize) < k);
            acc -= pv[y as usize * plane + pos].max(1e-300).ln();
        }
        let loss = acc / plane as f64;
        self.push(vec![], vec![loss], Op::NllMeanCh { p, labels: labels.to_vec() })
    }

    /// Negative log-likelihood of one probability vector entry.
    pub fn nll_vec(&mut self, p: NodeId, label: usize) -> NodeId {
        let v = self.nodes[p].values[label];
        self.push(vec![], vec![-v.max(1e-300).ln()], Op::NllVec { p, label })
    }

    /// Select one element of a vector as a scalar node.
    pub fn pick(&mut self, x: NodeId, idx: usize) -> NodeId {
        let v = self.nodes[x].values[idx];
        self.push(vec![], vec![v], Op::Pick { x, idx })
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[x].values.len(), 1);
        let v = self.nodes[x].values[0];
        self.push(vec![], vec![v.max(1e-300).ln()], Op::Ln { x })
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[x].values.len(), 1);
        let v = self.nodes[x].values[0];
        self.push(vec![], vec![v * v], Op::Square { x })
    }

    /// Scalar linear combination `sum coeff_i * node_i + bias`.
    pub fn affine(&mut self, terms: &[(NodeId, f64)], bias: f64) -> NodeId {
        let mut acc = bias;
        for &(id, k) in terms {
            debug_assert_eq!(self.nodes[id].values.len(), 1);
            acc += k * self.nodes[id].values[0];
        }
        self.push(vec![], vec![acc], Op::Affine { terms: terms.to_vec() })
    }

    /// Shannon entropy `-sum p ln p` of a probability vector.
    pub fn entropy_vec(&mut self, p: NodeId) -> NodeId {
        let pv = &self.nodes[p].values;
        let h: f64 = -pv.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
        self.push(vec![], vec![h], Op::EntropyVec { p })
    }

    /// Reverse sweep from `loss` (a scalar node), accumulating parameter
    /// gradients into `store`. Node gradients are also retained for
    /// inspection via [`Tape::grad`].
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) {
        for node in &mut self.nodes {
            node.grad = vec![0.0; node.values.len()];
        }
        assert_eq!(self.nodes[loss].values.len(), 1, "loss must be scalar");
        self.nodes[loss].grad[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &mut tail[0];
            if node.grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => {
                    let g = &mut store.get_mut(*pid).tensor.grad;
                    for (dst, src) in g.iter_mut().zip(&node.grad) {
                        *dst += src;
                    }
                }
                Op::Conv2d { x, w, b, stride, pad, mode, col } => {
                    let (co, ho, wo) = (node.dims[0], node.dims[1], node.dims[2]);
                    let positions = ho * wo;
                    let xd = &head[*x].dims;
                    let (ci, h, wd) = (xd[0], xd[1], xd[2]);
                    let wt_dims = store.get(*w).tensor.dims.clone();
                    let (kh, kw) = (wt_dims[2], wt_dims[3]);
                    let ckk = ci * kh * kw;
                    // dW += dOut * col^T, db += row sums
                    {
                        let mut dw = vec![0.0; co * ckk];
                        mm_nt(co, positions, ckk, &node.grad, col, &mut dw);
                        let pw = store.get_mut(*w);
                        for (dst, src) in pw.tensor.grad.iter_mut().zip(&dw) {
                            *dst += src;
                        }
                        let pb = store.get_mut(*b);
                        for oc in 0..co {
                            pb.tensor.grad[oc] += node.grad[oc * positions..(oc + 1) * positions].iter().sum::<f64>();
                        }
                    }
                    // dX += col2im(W^T * dOut)
                    let mut dcol = vec![0.0; ckk * positions];
                    mm_tn(ckk, co, positions, &store.get(*w).tensor.values, &node.grad, &mut dcol);
                    col2im_add(&mut head[*x].grad, ci, h, wd, kh, kw, *stride, *pad, *mode, ho, wo, &dcol);
                }
                Op::Relu { x } => {
                    let xin = &mut head[*x];
                    for ((dst, &g), &v) in xin.grad.iter_mut().zip(&node.grad).zip(&xin.values) {
                        if v > 0.0 {
                            *dst += g;
                        }
                    }
                }
                Op::UpNearest { x } => {
                    let (c, oh, ow) = (node.dims[0], node.dims[1], node.dims[2]);
                    let xin = &mut head[*x];
                    let (h, w) = (xin.dims[1], xin.dims[2]);
                    for ch in 0..c {
                        for r in 0..oh {
                            let sr = r * h / oh;
                            for cc in 0..ow {
                                let sc = cc * w / ow;
                                xin.grad[(ch * h + sr) * w + sc] += node.grad[(ch * oh + r) * ow + cc];
                            }
                        }
                    }
                }
                Op::UpBilinear { x } => {
                    let (c, oh, ow) = (node.dims[0], node.dims[1], node.dims[2]);
                    let xin = &mut head[*x];
                    let (h, w) = (xin.dims[1], xin.dims[2]);
                    for r in 0..oh {
                        let (r0, r1, tr) = bilinear_axis(r, h, oh);
                        for cc in 0..ow {
                            let (c0, c1, tc) = bilinear_axis(cc, w, ow);
                            for ch in 0..c {
                                let g = node.grad[(ch * oh + r) * ow + cc];
                                let base = ch * h;
                                xin.grad[(base + r0) * w + c0] += (1.0 - tr) * (1.0 - tc) * g;
                                xin.grad[(base + r0) * w + c1] += (1.0 - tr) * tc * g;
                                xin.grad[(base + r1) * w + c0] += tr * (1.0 - tc) * g;
                                xin.grad[(base + r1) * w + c1] += tr * tc * g;
                            }
                        }
                    }
                }
                Op::ResampleAffine { x, dy, dx, dst_cell, src_cell } => {
                    let (c, oh, ow) = (node.dims[0], node.dims[1], node.dims[2]);
                    let xin = &mut head[*x];
                    let (h, w) = (xin.dims[1], xin.dims[2]);
                    for r in 0..oh {
                        let (r0, r1, tr) = affine_axis(r, *dy, *dst_cell, *src_cell, h);
                        for cc in 0..ow {
                            let (c0, c1, tc) = affine_axis(cc, *dx, *dst_cell, *src_cell, w);
                            for ch in 0..c {
                                let g = node.grad[(ch * oh + r) * ow + cc];
                                let base = ch * h;
                                xin.grad[(base + r0) * w + c0] += (1.0 - tr) * (1.0 - tc) * g;
                                xin.grad[(base + r0) * w + c1] += (1.0 - tr) * tc * g;
                                xin.grad[(base + r1) * w + c0] += tr * (1.0 - tc) * g;
                                xin.grad[(base + r1) * w + c1] += tr * tc * g;
                            }
                        }
                    }
                }
                Op::Crop { x, r0, c0 } => {
                    let (c, ch, cw) = (node.dims[0], node.dims[1], node.dims[2]);
                    let xin = &mut head[*x];
                    let (h, w) = (xin.dims[1], xin.dims[2]);
                    for chan in 0..c {
                        for r in 0..ch {
                            let dst = (chan * h + r0 + r) * w + c0;
                            let src = (chan * ch + r) * cw;
                            for j in 0..cw {
                                xin.grad[dst + j] += node.grad[src + j];
                            }
                        }
                    }
                }
                Op::ConcatCh { a, b } => {
                    let na = head[*a].values.len();
                    for (dst, src) in head[*a].grad.iter_mut().zip(&node.grad[..na]) {
                        *dst += src;
                    }
                    let bslice = &node.grad[na..];
                    for (dst, src) in head[*b].grad.iter_mut().zip(bslice) {
                        *dst += src;
                    }
                }
                Op::Gap { x } => {
                    let xin = &mut head[*x];
                    let plane = xin.dims[1] * xin.dims[2];
                    let inv = 1.0 / plane as f64;
                    for ch in 0..node.dims[0] {
                        let g = node.grad[ch] * inv;
                        for dst in &mut xin.grad[ch * plane..(ch + 1) * plane] {
                            *dst += g;
                        }
                    }
                }
                Op::MaskMul { x, mask } => {
                    let xin = &mut head[*x];
                    let plane = mask.len();
                    for ch in 0..node.dims[0] {
                        let base = ch * plane;
                        for (i, &m) in mask.iter().enumerate() {
                            xin.grad[base + i] += node.grad[base + i] * m;
                        }
                    }
                }
                Op::MaskedGap { x, mask, count } => {
                    let xin = &mut head[*x];
                    let plane = mask.len();
                    let inv = 1.0 / count;
                    for ch in 0..node.dims[0] {
                        let g = node.grad[ch] * inv;
                        let base = ch * plane;
                        for (i, &m) in mask.iter().enumerate() {
                            if m != 0.0 {
                                xin.grad[base + i] += g;
                            }
                        }
                    }
                }
                Op::Dense { x, w, b } => {
                    let xin = &mut head[*x];
                    let n = xin.values.len();
                    let m = node.values.len();
                    {
                        let pw = store.get_mut(*w);
                        for i in 0..m {
                            let g = node.grad[i];
                            if g != 0.0 {
                                for j in 0..n {
                                    pw.tensor.grad[i * n + j] += g * xin.values[j];
                                }
                            }
                        }
                    }
                    {
                        let pb = store.get_mut(*b);
                        for i in 0..m {
                            pb.tensor.grad[i] += node.grad[i];
                        }
                    }
                    let wvals = &store.get(*w).tensor.values;
                    for i in 0..m {
                        let g = node.grad[i];
                        if g != 0.0 {
                            for j in 0..n {
                                xin.grad[j] += g * wvals[i * n + j];
                            }
                        }
                    }
                }
                Op::SoftmaxCh { x } => {
                    let (k, h, w) = (node.dims[0], node.dims[1], node.dims[2]);
                    let plane = h * w;
                    let xin = &mut head[*x];
                    for pos in 0..plane {
                        let mut dot = 0.0;
                        for c in 0..k {
                            dot += node.grad[c * plane + pos] * node.values[c * plane + pos];
                        }
                        for c in 0..k {
                            let p = node.values[c * plane + pos];
                            xin.grad[c * plane + pos] += p * (node.grad[c * plane + pos] - dot);
                        }
                    }
                }
                Op::SoftmaxVec { x } => {
                    let xin = &mut head[*x];
                    let dot: f64 = node.grad.iter().zip(&node.values).map(|(g, p)| g * p).sum();
                    for ((dst, &p), &g) in xin.grad.iter_mut().zip(&node.values).zip(&node.grad) {
                        *dst += p * (g - dot);
                    }
                }
                Op::NllMeanCh { p, labels } => {
                    let g = node.grad[0];
                    let pin = &mut head[*p];
                    let plane = labels.len();
                    let inv = g / plane as f64;
                    for (pos, &y) in labels.iter().enumerate() {
                        let idx = y as usize * plane + pos;
                        pin.grad[idx] -= inv / pin.values[idx].max(1e-300);
                    }
                }
                Op::NllVec { p, label } => {
                    let g = node.grad[0];
                    let pin = &mut head[*p];
                    pin.grad[*label] -= g / pin.values[*label].max(1e-300);
                }
                Op::Pick { x, idx } => {
                    head[*x].grad[*idx] += node.grad[0];
                }
                Op::Ln { x } => {
                    let xin = &mut head[*x];
                    xin.grad[0] += node.grad[0] / xin.values[0].max(1e-300);
                }
                Op::Square { x } => {
                    let xin = &mut head[*x];
                    xin.grad[0] += node.grad[0] * 2.0 * xin.values[0];
                }
                Op::Affine { terms } => {
                    let g = node.grad[0];
                    for &(id, k) in terms {
                        head[id].grad[0] += g * k;
                    }
                }
                Op::EntropyVec { p } => {
                    let g = node.grad[0];
                    let pin = &mut head[*p];
                    for (dst, &v) in pin.grad.iter_mut().zip(&pin.values) {
                        if v > 0.0 {
                            *dst += -g * (v.ln() + 1.0);
                        }
                    }
                }
            }
        }
    }
}

/// Source/weight pair for one output coordinate of a bilinear resize with
/// half-pixel centers.
fn bilinear_axis(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let pos = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5;
    let pos = pos.clamp(0.0, (src_len - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, pos - i0 as f64)
}

/// Sample coordinate for [`Tape::resample_affine`]: the center of output
/// cell `dst` expressed in input-cell units, clamped to the input extent.
fn affine_axis(dst: usize, offset: f64, dst_cell: f64, src_cell: f64, src_len: usize) -> (usize, usize, f64) {
    let pos = (offset + (dst as f64 + 0.5) * dst_cell) / src_cell - 0.5;
    let pos = pos.clamp(0.0, (src_len - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, pos - i0 as f64)
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
    ho: usize,
    wo: usize,
    col: &mut [f64],
) {
    let positions = ho * wo;
    for c in 0..ci {
        for dr in 0..kh {
            for dc in 0..kw {
                let row = ((c * kh + dr) * kw + dc) * positions;
                for oy in 0..ho {
                    let iy = (oy * stride + dr) as i64 - pad as i64;
                    let iy = match clamp_coord(iy, h, mode) {
                        Some(v) => v,
                        None => continue,
                    };
                    let src_base = (c * h + iy) * w;
                    let dst_base = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + dc) as i64 - pad as i64;
                        if let Some(ix) = clamp_coord(ix, w, mode) {
                            col[dst_base + ox] = x[src_base + ix];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    dx: &mut [f64],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
    ho: usize,
    wo: usize,
    dcol: &[f64],
) {
    let positions = ho * wo;
    for c in 0..ci {
        for dr in 0..kh {
            for dc in 0..kw {
                let row = ((c * kh + dr) * kw + dc) * positions;
                for oy in 0..ho {
                    let iy = (oy * stride + dr) as i64 - pad as i64;
                    let iy = match clamp_coord(iy, h, mode) {
                        Some(v) => v,
                        None => continue,
                    };
                    let dst_base = (c * h + iy) * w;
                    let src_base = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + dc) as i64 - pad as i64;
                        if let Some(ix) = clamp_coord(ix, w, mode) {
                            dx[dst_base + ix] += dcol[src_base + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Map a possibly out-of-range coordinate according to the padding mode:
/// `None` means the tap reads a zero.
#[inline]
fn clamp_coord(i: i64, len: usize, mode: PadMode) -> Option<usize> {
    if i >= 0 && i < len as i64 {
        Some(i as usize)
    } else {
        match mode {
            PadMode::Zero => None,
            PadMode::Replicate => Some(i.clamp(0, len as i64 - 1) as usize),
        }
    }
}

/// C[m,n] += A[m,k] * B[k,n]
fn mm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T
fn mm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// C[m,n] += A[k,m]^T * B[k,n]
fn mm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let crow = &mut c[i * n..(i + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_1x1_identity_kernel() {
        let mut store = ParamStore::new();
        let w = store.add_values("w", vec![1, 1, 1, 1], vec![1.0]);
        let b = store.add_zeros("b", vec![1]);
        let mut tape = Tape::new();
        let x = tape.input(vec![1, 2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let y = tape.conv2d(&store, x, w, b, 1, 0, PadMode::Zero);
        assert_eq!(tape.values(y), tape.values(x));
    }

    #[test]
    fn conv_stride_two_shape() {
        let mut store = ParamStore::new();
        let w = store.add_he("w", vec![4, 3, 3, 3], 27, 1);
        let b = store.add_zeros("b", vec![4]);
        let mut tape = Tape::new();
        let x = tape.zeros(vec![3, 16, 16]);
        let y = tape.conv2d(&store, x, w, b, 2, 1, PadMode::Zero);
        assert_eq!(tape.dims(y), &[4, 8, 8]);
    }

    #[test]
    fn softmax_ce_closed_form() {
        // logits (0,0), true class 0 -> loss ln 2
        let mut tape = Tape::new();
        let x = tape.input(vec![2, 1, 1], vec![0.0, 0.0]);
        let p = tape.softmax_ch(x);
        let loss = tape.nll_mean_ch(p, &[0]);
        assert!((tape.scalar(loss) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.input(vec![3, 2, 2], (0..12).map(|i| i as f64 * 0.7 - 3.0).collect());
        let p = tape.softmax_ch(x);
        let v = tape.values(p);
        for pos in 0..4 {
            let s: f64 = (0..3).map(|c| v[c * 4 + pos]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gap_constant_map_and_gradient() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(vec![1, 2, 2], vec![0.25; 4]);
        let y = tape.gap(x);
        assert_eq!(tape.values(y), &[0.25]);
        tape.backward(y, &mut store);
        assert_eq!(tape.grad(x), &[0.25; 4]); // 1/(h*w)
    }

    #[test]
    fn masked_gap_top_row() {
        // feature [[1,2],[3,4]], mask = top row -> 1.5
        let mut tape = Tape::new();
        let x = tape.input(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = tape.masked_gap(x, &[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(tape.values(y), &[1.5]);
    }

    #[test]
    fn masked_gap_full_mask_equals_gap() {
        let mut tape = Tape::new();
        let x = tape.input(vec![2, 2, 2], (0..8).map(|i| i as f64).collect());
        let a = tape.gap(x);
        let b = tape.masked_gap(x, &[1.0; 4]).unwrap();
        assert_eq!(tape.values(a), tape.values(b));
    }

    #[test]
    fn masked_gap_empty_mask_errors() {
        let mut tape = Tape::new();
        let x = tape.zeros(vec![1, 2, 2]);
        assert!(tape.masked_gap(x, &[0.0; 4]).is_err());
    }

    #[test]
    fn bilinear_preserves_constant_and_simplex() {
        let mut tape = Tape::new();
        let x = tape.input(vec![1, 2, 2], vec![0.3; 4]);
        let y = tape.upsample_bilinear(x, 5, 7);
        assert!(tape.values(y).iter().all(|&v| (v - 0.3).abs() < 1e-15));

        let logits = tape.input(vec![3, 2, 2], (0..12).map(|i| (i as f64).sin()).collect());
        let p = tape.softmax_ch(logits);
        let up = tape.upsample_bilinear(p, 8, 8);
        let v = tape.values(up);
        for pos in 0..64 {
            let s: f64 = (0..3).map(|c| v[c * 64 + pos]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn crop_out_of_bounds_is_geometry_error() {
        let mut tape = Tape::new();
        let x = tape.zeros(vec![1, 4, 4]);
        assert!(tape.crop(x, 2, 2, 3, 1).is_err());
        assert!(tape.crop(x, 0, 0, 0, 1).is_err());
    }

    #[test]
    fn scalar_square_gradient() {
        let mut store = ParamStore::new();
        let id = store.add_values("x", vec![1], vec![3.0]);
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let sq = tape.pick(x, 0);
        let y = tape.square(sq);
        tape.backward(y, &mut store);
        assert!((store.get(id).tensor.grad[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_of_uniform() {
        let mut tape = Tape::new();
        let p = tape.input(vec![4], vec![0.25; 4]);
        let h = tape.entropy_vec(p);
        assert!((tape.scalar(h) - 4.0f64.ln()).abs() < 1e-12);
    }
}
