//! Dual-branch scale-variable segmentation network.
//!
//! One shared-weight encoder runs on the local patch and (when the scale
//! action is > 1) on the downsampled context window. The sub-window of the
//! context feature map that covers the local patch is cropped by geographic
//! coordinates, bilinearly upsampled to the local feature size,
//! channel-concatenated with the local features, fused by a 3x3
//! convolution, classified by a 1x1 convolution + softmax, and upsampled
//! back to patch resolution. At scale 1 the context branch is deactivated
//! and the fusion sees zero-filled context channels, so a single parameter
//! set serves every action.
//!
//! Auxiliary 1x1 heads on each branch's features provide per-branch
//! supervision during training.

use crate::error::{Error, Result};
use crate::nn::{sgd_step, NodeId, OptimizerConfig, PadMode, ParamId, ParamStore, Tape};
use crate::tiling::{LabelMask, PatchSpec, ProbMap, Raster};

#[derive(Debug, Clone, PartialEq)]
pub struct SegNetConfig {
    pub classes: usize,
    /// Encoder stage widths; each stage is a stride-2 3x3 convolution, so
    /// the encoder stride is `2^channels.len()`.
    pub channels: Vec<usize>,
    pub fusion_channels: usize,
    /// Weight of each auxiliary loss term.
    pub aux_weight: f64,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig { classes: 4, channels: vec![16, 32, 64], fusion_channels: 64, aux_weight: 0.4 }
    }
}

pub struct SegNet {
    pub cfg: SegNetConfig,
    pub in_channels: usize,
    pub params: ParamStore,
    enc: Vec<(ParamId, ParamId)>,
    fuse: (ParamId, ParamId),
    cls: (ParamId, ParamId),
    aux_local: (ParamId, ParamId),
    aux_ctx: (ParamId, ParamId),
    step: usize,
}

/// Forward-pass handle: the tape plus the nodes callers care about.
pub struct SegForward {
    pub tape: Tape,
    pub final_probs: NodeId,
    pub aux_local: NodeId,
    /// Present iff the context branch ran (scale > 1).
    pub aux_context: Option<NodeId>,
    pub f_local: NodeId,
    pub f_context: Option<NodeId>,
}

impl SegNet {
    pub fn new(cfg: SegNetConfig, in_channels: usize, seed: u64) -> Self {
        assert!(!cfg.channels.is_empty(), "encoder needs at least one stage");
        let mut params = ParamStore::new();
        let mut enc = Vec::new();
        let mut prev = in_channels;
        for (i, &ch) in cfg.channels.iter().enumerate() {
            let w = params.add_he(&format!("seg.enc{}.w", i + 1), vec![ch, prev, 3, 3], prev * 9, seed);
            let b = params.add_zeros(&format!("seg.enc{}.b", i + 1), vec![ch]);
            enc.push((w, b));
            prev = ch;
        }
        let feat = prev;
        let fuse_in = 2 * feat;
        let fuse = (
            params.add_he("seg.fuse.w", vec![cfg.fusion_channels, fuse_in, 3, 3], fuse_in * 9, seed),
            params.add_zeros("seg.fuse.b", vec![cfg.fusion_channels]),
        );
        let cls = (
            params.add_he("seg.cls.w", vec![cfg.classes, cfg.fusion_channels, 1, 1], cfg.fusion_channels, seed),
            params.add_zeros("seg.cls.b", vec![cfg.classes]),
        );
        let aux_local = (
            params.add_he("seg.aux_local.w", vec![cfg.classes, feat, 1, 1], feat, seed),
            params.add_zeros("seg.aux_local.b", vec![cfg.classes]),
        );
        let aux_ctx = (
            params.add_he("seg.aux_context.w", vec![cfg.classes, feat, 1, 1], feat, seed),
            params.add_zeros("seg.aux_context.b", vec![cfg.classes]),
        );
        SegNet { cfg, in_channels, params, enc, fuse, cls, aux_local, aux_ctx, step: 0 }
    }

    /// Product of stage strides.
    pub fn stride(&self) -> usize {
        1 << self.enc.len()
    }

    pub fn optimizer_step(&self) -> usize {
        self.step
    }

    pub fn set_optimizer_step(&mut self, step: usize) {
        self.step = step;
    }

    fn wiring(&self) -> Wiring {
        Wiring {
            enc: self.enc.clone(),
            fuse: self.fuse,
            cls: self.cls,
            aux_local: self.aux_local,
            aux_ctx: self.aux_ctx,
            feat_channels: *self.cfg.channels.last().unwrap(),
            stride: self.stride(),
        }
    }

    /// Run the network on a local patch and optional context patch.
    ///
    /// `patch.scale` is the acting scale: at 1, `x_ctx` must be absent; above
    /// 1 it must be the context raster from
    /// [`crate::tiling::extract_context`], whose `origin` carries the
    /// context window placement used for coordinate-based cropping.
    pub fn forward(&self, x_loc: &Raster, x_ctx: Option<&Raster>, patch: &PatchSpec) -> Result<SegForward> {
        let s = self.stride();
        if x_loc.channels != self.in_channels {
            return Err(Error::Dimension(format!(
                "expected {} input channels, got {}",
                self.in_channels, x_loc.channels
            )));
        }
        if x_loc.height != patch.h || x_loc.width != patch.w {
            return Err(Error::Dimension("local patch does not match the patch spec".into()));
        }
        if patch.h % s != 0 || patch.w % s != 0 {
            return Err(Error::Dimension(format!(
                "patch {}x{} not divisible by encoder stride {s}",
                patch.h, patch.w
            )));
        }
        match (patch.scale, x_ctx) {
            (0, _) => return Err(Error::Dimension("scale must be >= 1".into())),
            (1, Some(_)) => return Err(Error::Dimension("context input given but scale is 1".into())),
            (a, None) if a > 1 => return Err(Error::Dimension("scale > 1 requires a context input".into())),
            _ => {}
        }

        let mut tape = Tape::new();
        let wiring = self.wiring();
        let (final_probs, aux_local, aux_context, f_local, f_context) =
            wiring.build(&mut tape, &self.params, x_loc, x_ctx, patch)?;
        Ok(SegForward { tape, final_probs, aux_local, aux_context, f_local, f_context })
    }

    /// Finite-difference check of every parameter against the full forward
    /// + loss graph for the given sample. Returns the max relative error.
    pub fn check_gradients(
        &mut self,
        x_loc: &Raster,
        x_ctx: Option<&Raster>,
        patch: &PatchSpec,
        y_patch: &LabelMask,
        y_context: Option<&LabelMask>,
    ) -> Result<f64> {
        let wiring = self.wiring();
        let aux_weight = self.cfg.aux_weight;
        // dry run surfaces input errors before the checker loops
        {
            let mut tape = Tape::new();
            wiring.build(&mut tape, &self.params, x_loc, x_ctx, patch)?;
        }
        Ok(crate::nn::grad_check(&mut self.params, |tape, store| {
            let (final_probs, aux_local, aux_context, _, _) =
                wiring.build(tape, store, x_loc, x_ctx, patch).expect("shapes validated by dry run");
            let ce = tape.nll_mean_ch(final_probs, &y_patch.data);
            let ce_l = tape.nll_mean_ch(aux_local, &y_patch.data);
            let mut terms = vec![(ce, 1.0), (ce_l, aux_weight)];
            if let (Some(aux_ctx), Some(y_ctx)) = (aux_context, y_context) {
                let ce_c = tape.nll_mean_ch(aux_ctx, &y_ctx.data);
                terms.push((ce_c, aux_weight));
            }
            tape.affine(&terms, 0.0)
        }))
    }

    /// Supervised loss on a forward pass:
    /// `CE(final, y) + aux_weight * CE(aux_local, y) [+ aux_weight * CE(aux_context, y_ctx)]`.
    /// `y_context` is the label mask over the context footprint,
    /// majority-downsampled to patch size; it must be present iff the
    /// context branch ran.
    pub fn loss(&self, fwd: &mut SegForward, y_patch: &LabelMask, y_context: Option<&LabelMask>) -> Result<NodeId> {
        if y_patch.height * y_patch.width != self.patch_plane(fwd) {
            return Err(Error::Dimension("labels do not match patch size".into()));
        }
        let tape = &mut fwd.tape;
        let ce_final = tape.nll_mean_ch(fwd.final_probs, &y_patch.data);
        let ce_aux_local = tape.nll_mean_ch(fwd.aux_local, &y_patch.data);
        let mut terms = vec![(ce_final, 1.0), (ce_aux_local, self.cfg.aux_weight)];
        match (fwd.aux_context, y_context) {
            (Some(aux_ctx), Some(y_ctx)) => {
                if y_ctx.height * y_ctx.width != y_patch.height * y_patch.width {
                    return Err(Error::Dimension("context labels do not match patch size".into()));
                }
                let ce_aux_ctx = tape.nll_mean_ch(aux_ctx, &y_ctx.data);
                terms.push((ce_aux_ctx, self.cfg.aux_weight));
            }
            (None, None) => {}
            _ => return Err(Error::Dimension("context labels must be given iff the context branch ran".into())),
        }
        Ok(tape.affine(&terms, 0.0))
    }

    fn patch_plane(&self, fwd: &SegForward) -> usize {
        let d = fwd.tape.dims(fwd.final_probs);
        d[1] * d[2]
    }

    /// One training step on a single patch: forward, loss, backward, SGD.
    /// Returns the loss value.
    pub fn train_step(
        &mut self,
        x_loc: &Raster,
        x_ctx: Option<&Raster>,
        patch: &PatchSpec,
        y_patch: &LabelMask,
        y_context: Option<&LabelMask>,
        opt: &OptimizerConfig,
    ) -> Result<f64> {
        let mut fwd = self.forward(x_loc, x_ctx, patch)?;
        let loss = self.loss(&mut fwd, y_patch, y_context)?;
        let value = fwd.tape.scalar(loss);
        self.params.zero_grads();
        fwd.tape.backward(loss, &mut self.params);
        sgd_step(&mut self.params, opt, self.step);
        self.step += 1;
        Ok(value)
    }

    /// Inference: class probabilities for the patch at the given scale.
    pub fn predict(&self, x_loc: &Raster, x_ctx: Option<&Raster>, patch: &PatchSpec) -> Result<ProbMap> {
        let fwd = self.forward(x_loc, x_ctx, patch)?;
        Ok(extract_probs(&fwd.tape, fwd.final_probs))
    }

    /// Single-branch inference: the input raster is treated as a local
    /// patch (context deactivated) regardless of the scale it represents.
    pub fn predict_single_branch(&self, x: &Raster) -> Result<ProbMap> {
        let p = PatchSpec::new(0, 0, x.height, x.width);
        let mut x_local = x.clone();
        x_local.origin = (0, 0);
        let fwd = self.forward(&x_local, None, &p)?;
        Ok(extract_probs(&fwd.tape, fwd.final_probs))
    }

    /// Context-branch-only inference: encode the input and read the
    /// context auxiliary head, giving probabilities over the input's
    /// footprint.
    pub fn predict_context_head(&self, x: &Raster) -> Result<ProbMap> {
        if x.channels != self.in_channels {
            return Err(Error::Dimension("input channels mismatch".into()));
        }
        if x.height % self.stride() != 0 || x.width % self.stride() != 0 {
            return Err(Error::Dimension("input not divisible by encoder stride".into()));
        }
        let mut tape = Tape::new();
        let wiring = self.wiring();
        let xin = tape.input_raster_centered(x);
        let feat = wiring.encode(&mut tape, &self.params, xin);
        let probs = wiring.head(&mut tape, &self.params, feat, self.aux_ctx, x.height, x.width);
        Ok(extract_probs(&tape, probs))
    }
}

/// Layer handles detached from the parameter store, so the same graph can
/// be rebuilt against perturbed parameters during gradient checking.
struct Wiring {
    enc: Vec<(ParamId, ParamId)>,
    fuse: (ParamId, ParamId),
    cls: (ParamId, ParamId),
    aux_local: (ParamId, ParamId),
    aux_ctx: (ParamId, ParamId),
    feat_channels: usize,
    stride: usize,
}

impl Wiring {
    fn encode(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let mut cur = x;
        for &(w, b) in &self.enc {
            cur = tape.conv2d(store, cur, w, b, 2, 1, PadMode::Replicate);
            cur = tape.relu(cur);
        }
        cur
    }

    fn head(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        feat: NodeId,
        head: (ParamId, ParamId),
        oh: usize,
        ow: usize,
    ) -> NodeId {
        let logits = tape.conv2d(store, feat, head.0, head.1, 1, 0, PadMode::Zero);
        let probs = tape.softmax_ch(logits);
        tape.upsample_bilinear(probs, oh, ow)
    }

    /// Build the full dual-branch graph; returns
    /// (final, aux_local, aux_context, f_local, f_context).
    #[allow(clippy::type_complexity)]
    fn build(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_loc: &Raster,
        x_ctx: Option<&Raster>,
        patch: &PatchSpec,
    ) -> Result<(NodeId, NodeId, Option<NodeId>, NodeId, Option<NodeId>)> {
        let s = self.stride;
        let x = tape.input_raster_centered(x_loc);
        let f_local = self.encode(tape, store, x);
        let (fh, fw) = (patch.h / s, patch.w / s);

        let (ctx_for_fusion, f_context) = if let Some(ctx) = x_ctx {
            if ctx.height != patch.h || ctx.width != patch.w {
                return Err(Error::Dimension("context patch must match the local patch size".into()));
            }
            let xc = tape.input_raster_centered(ctx);
            let f_ctx = self.encode(tape, store, xc);
            let offset = patch_offset_in_context(x_loc, ctx);
            let dims = tape.dims(f_ctx);
            let (r0c, r1c, c0c, c1c) =
                context_crop_cells(patch, patch.scale, s, offset, (dims[1], dims[2]))?;
            let cropped = tape.crop(f_ctx, r0c, c0c, r1c - r0c, c1c - c0c)?;
            // sample at local-feature cell centers so the two branches stay
            // registered in source coordinates at every scale
            let cell = (patch.scale as usize * s) as f64;
            let dy = offset.0 as f64 - r0c as f64 * cell;
            let dx = offset.1 as f64 - c0c as f64 * cell;
            let up = tape.resample_affine(cropped, fh, fw, dy, dx, s as f64, cell);
            (up, Some(f_ctx))
        } else {
            (tape.zeros(vec![self.feat_channels, fh, fw]), None)
        };

        let both = tape.concat_ch(f_local, ctx_for_fusion);
        let fused = tape.conv2d(store, both, self.fuse.0, self.fuse.1, 1, 1, PadMode::Replicate);
        let fused = tape.relu(fused);
        let final_probs = self.head(tape, store, fused, self.cls, patch.h, patch.w);
        let aux_local = self.head(tape, store, f_local, self.aux_local, patch.h, patch.w);
        let aux_context = f_context.map(|fc| self.head(tape, store, fc, self.aux_ctx, patch.h, patch.w));
        Ok((final_probs, aux_local, aux_context, f_local, f_context))
    }
}

fn extract_probs(tape: &Tape, node: NodeId) -> ProbMap {
    let d = tape.dims(node);
    ProbMap { classes: d[0], height: d[1], width: d[2], data: tape.values(node).to_vec() }
}

/// Cell range `[r0, r1) x [c0, c1)` of the context feature map whose
/// source footprints intersect the local patch rectangle.
///
/// `ctx_origin_to_patch` is the local patch's top-left corner in
/// context-window pixels (accounting for the window's translation near
/// raster edges); each feature cell covers `scale * stride` source pixels.
pub fn context_crop_cells(
    patch: &PatchSpec,
    scale: u32,
    stride: usize,
    ctx_origin_to_patch: (i64, i64),
    feat_hw: (usize, usize),
) -> Result<(usize, usize, usize, usize)> {
    if scale < 2 {
        return Err(Error::Geometry("context cropping requires scale >= 2".into()));
    }
    let cell = scale as usize * stride;
    let (fch, fcw) = feat_hw;
    let (off_r, off_c) = ctx_origin_to_patch;
    if off_r < 0 || off_c < 0 {
        return Err(Error::Geometry(format!(
            "patch lies outside its context window (offset {off_r},{off_c})"
        )));
    }
    let (off_r, off_c) = (off_r as usize, off_c as usize);
    let r0 = off_r / cell;
    let r1 = (off_r + patch.h).div_ceil(cell).min(fch);
    let c0 = off_c / cell;
    let c1 = (off_c + patch.w).div_ceil(cell).min(fcw);
    if r0 >= r1 || c0 >= c1 {
        return Err(Error::Geometry("context crop selected an empty region".into()));
    }
    Ok((r0, r1, c0, c1))
}

/// Crop the cells of the context feature map whose source footprints
/// intersect the local patch rectangle.
pub fn crop_context_features(
    tape: &mut Tape,
    f_ctx: NodeId,
    patch: &PatchSpec,
    scale: u32,
    stride: usize,
    ctx_origin_to_patch: (i64, i64),
) -> Result<NodeId> {
    let dims = tape.dims(f_ctx);
    let (r0, r1, c0, c1) = context_crop_cells(patch, scale, stride, ctx_origin_to_patch, (dims[1], dims[2]))?;
    tape.crop(f_ctx, r0, c0, r1 - r0, c1 - c0)
}

/// Offset of the local patch inside its context window, from the two
/// rasters' origin bookkeeping.
pub fn patch_offset_in_context(x_loc: &Raster, x_ctx: &Raster) -> (i64, i64) {
    (x_loc.origin.0 - x_ctx.origin.0, x_loc.origin.1 - x_ctx.origin.1)
}
