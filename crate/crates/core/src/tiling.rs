//! Raster geometry: sliding-window grids, patch and context extraction,
//! thumbnails, position masks, and stitching predictions back together.
//!
//! Conventions used throughout:
//!
//! - Rasters are `[C, H, W]` row-major with values in `[0, 1]`.
//! - Grids are row-major with stride equal to the patch size; when the
//!   raster does not divide evenly the final row/column of patches is
//!   anchored to the raster edge, producing overlap instead of padding.
//! - Context windows are `(a*h, a*w)` boxes centered on the patch. They are
//!   translated (not shrunk) to stay inside the raster; only when a window
//!   is larger than the raster itself are out-of-range pixels filled by
//!   edge replication.
//! - All downsampling is area averaging (box filter). Label downsampling
//!   uses majority vote with ties broken by the lowest class index.

use crate::error::{Error, Result};

/// A 2-D multi-channel image with integer-pixel coordinate bookkeeping.
///
/// `origin` is the position of pixel (0,0) in the coordinate frame of the
/// raster this one was cut from; it may be negative for context windows
/// that extend past the source (the out-of-range part is edge-replicated).
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub origin: (i64, i64),
    /// `[C, H, W]` row-major.
    pub data: Vec<f64>,
}

impl Raster {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Raster { channels, height, width, origin: (0, 0), data: vec![0.0; channels * height * width] }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "raster data length {} does not match {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Raster { channels, height, width, origin: (0, 0), data })
    }

    #[inline]
    pub fn get(&self, c: usize, r: usize, col: usize) -> f64 {
        self.data[(c * self.height + r) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, c: usize, r: usize, col: usize, v: f64) {
        self.data[(c * self.height + r) * self.width + col] = v;
    }

    /// Read with edge replication: out-of-range coordinates clamp to the
    /// nearest valid pixel.
    #[inline]
    pub fn get_clamped(&self, c: usize, r: i64, col: i64) -> f64 {
        let r = r.clamp(0, self.height as i64 - 1) as usize;
        let col = col.clamp(0, self.width as i64 - 1) as usize;
        self.get(c, r, col)
    }
}

/// Per-pixel class indices paired with a raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub data: Vec<u8>,
}

impl LabelMask {
    pub fn zeros(height: usize, width: usize, classes: usize) -> Self {
        LabelMask { height, width, classes, data: vec![0; height * width] }
    }

    pub fn from_data(height: usize, width: usize, classes: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "label data length {} does not match {}x{}",
                data.len(),
                height,
                width
            )));
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= classes) {
            return Err(Error::Dimension(format!(
                "label value {bad} out of range for {classes} classes"
            )));
        }
        Ok(LabelMask { height, width, classes, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.data[r * self.width + c] = v;
    }

    /// Crop `h x w` at `(row, col)` with edge replication for coordinates
    /// outside the mask.
    pub fn window_replicated(&self, row: i64, col: i64, h: usize, w: usize) -> LabelMask {
        let mut out = LabelMask::zeros(h, w, self.classes);
        for r in 0..h {
            let sr = (row + r as i64).clamp(0, self.height as i64 - 1) as usize;
            for c in 0..w {
                let sc = (col + c as i64).clamp(0, self.width as i64 - 1) as usize;
                out.data[r * w + c] = self.data[sr * self.width + sc];
            }
        }
        out
    }

    /// Majority-vote downsample by an integer factor; ties break toward the
    /// lowest class index. Dimensions must divide evenly.
    pub fn majority_downsample(&self, factor: usize) -> Result<LabelMask> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Dimension(format!(
                "mask {}x{} not divisible by factor {factor}",
                self.height, self.width
            )));
        }
        let (oh, ow) = (self.height / factor, self.width / factor);
        let mut out = LabelMask::zeros(oh, ow, self.classes);
        let mut counts = vec![0usize; self.classes];
        for r in 0..oh {
            for c in 0..ow {
                counts.iter_mut().for_each(|x| *x = 0);
                for dr in 0..factor {
                    for dc in 0..factor {
                        counts[self.get(r * factor + dr, c * factor + dc) as usize] += 1;
                    }
                }
                let mut best = 0usize;
                for k in 1..self.classes {
                    if counts[k] > counts[best] {
                        best = k;
                    }
                }
                out.set(r, c, best as u8);
            }
        }
        Ok(out)
    }
}

/// Binary image marking a patch footprint at thumbnail resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask { height, width, data: vec![0; height * width] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c] != 0
    }

    pub fn popcount(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Any-overlap downsample onto an `oh x ow` grid: an output cell is set
    /// iff any source cell whose footprint intersects it is set. Uses the
    /// same proportional footprint rule as [`make_position_mask`].
    pub fn downsample_any(&self, oh: usize, ow: usize) -> BinaryMask {
        let mut out = BinaryMask::zeros(oh, ow);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    // cells [r*oh, (r+1)*oh) / self.height along rows
                    let r0 = r * oh / self.height;
                    let r1 = ((r + 1) * oh).div_ceil(self.height).min(oh);
                    let c0 = c * ow / self.width;
                    let c1 = ((c + 1) * ow).div_ceil(self.width).min(ow);
                    for rr in r0..r1 {
                        for cc in c0..c1 {
                            out.data[rr * ow + cc] = 1;
                        }
                    }
                }
            }
        }
        out
    }
}

/// One tile of the sliding-window grid: position, size, and context scale.
/// Grids are built with `scale == 1`; the scale is set per timestep once an
/// action has been chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub row: usize,
    pub col: usize,
    pub h: usize,
    pub w: usize,
    pub scale: u32,
}

impl PatchSpec {
    pub fn new(row: usize, col: usize, h: usize, w: usize) -> Self {
        PatchSpec { row, col, h, w, scale: 1 }
    }

    pub fn with_scale(mut self, scale: u32) -> Self {
        self.scale = scale;
        self
    }
}

/// Row-major sliding-window grid covering a raster.
#[derive(Debug, Clone)]
pub struct TileGrid {
    pub patches: Vec<PatchSpec>,
    pub raster_h: usize,
    pub raster_w: usize,
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Anchors along one axis: stride `step`, final window anchored to the
/// edge when `extent` is not a multiple of `step`.
fn axis_anchors(extent: usize, step: usize) -> Vec<usize> {
    let n = extent.div_ceil(step);
    (0..n).map(|i| (i * step).min(extent - step)).collect()
}

/// Build the row-major grid of `h x w` patches over `raster`.
pub fn build_grid(raster: &Raster, h: usize, w: usize) -> Result<TileGrid> {
    if h == 0 || w == 0 || h > raster.height || w > raster.width {
        return Err(Error::Dimension(format!(
            "patch {h}x{w} does not fit raster {}x{}",
            raster.height, raster.width
        )));
    }
    let rows = axis_anchors(raster.height, h);
    let cols = axis_anchors(raster.width, w);
    let mut patches = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            patches.push(PatchSpec::new(r, c, h, w));
        }
    }
    Ok(TileGrid { patches, raster_h: raster.height, raster_w: raster.width })
}

/// Crop the patch at original resolution. Pure copy, no resampling.
pub fn extract_local(raster: &Raster, p: &PatchSpec) -> Result<Raster> {
    if p.row + p.h > raster.height || p.col + p.w > raster.width {
        return Err(Error::Dimension(format!(
            "patch at ({},{}) size {}x{} exceeds raster {}x{}",
            p.row, p.col, p.h, p.w, raster.height, raster.width
        )));
    }
    let mut out = Raster::zeros(raster.channels, p.h, p.w);
    out.origin = (raster.origin.0 + p.row as i64, raster.origin.1 + p.col as i64);
    for c in 0..raster.channels {
        for r in 0..p.h {
            let src = (c * raster.height + p.row + r) * raster.width + p.col;
            let dst = (c * p.h + r) * p.w;
            out.data[dst..dst + p.w].copy_from_slice(&raster.data[src..src + p.w]);
        }
    }
    Ok(out)
}

/// Top-left corner of the `(a*h, a*w)` context window for patch `p`.
///
/// The window is centered on the patch, then translated to fit inside the
/// raster. When the window is larger than the raster along an axis the
/// origin goes negative (or past the end); reads are then edge-replicated.
pub fn context_window_origin(p: &PatchSpec, a: u32, raster_h: usize, raster_w: usize) -> (i64, i64) {
    let a = a as i64;
    let (h, w) = (p.h as i64, p.w as i64);
    let ideal_r = p.row as i64 - (a - 1) * h / 2;
    let ideal_c = p.col as i64 - (a - 1) * w / 2;
    let fit = |ideal: i64, extent: i64, win: i64| -> i64 {
        let lo = 0.min(extent - win);
        let hi = 0.max(extent - win);
        ideal.clamp(lo, hi)
    };
    (fit(ideal_r, raster_h as i64, a * h), fit(ideal_c, raster_w as i64, a * w))
}

/// Extract the context patch for `p` at scale `a`: the `(a*h, a*w)` window
/// from [`context_window_origin`], box-downsampled by `a` to `h x w`. For
/// `a == 1` this equals [`extract_local`].
pub fn extract_context(raster: &Raster, p: &PatchSpec, a: u32) -> Result<Raster> {
    if a == 0 {
        return Err(Error::Dimension("context scale must be >= 1".into()));
    }
    if p.row + p.h > raster.height || p.col + p.w > raster.width {
        return Err(Error::Dimension(format!(
            "patch at ({},{}) size {}x{} exceeds raster {}x{}",
            p.row, p.col, p.h, p.w, raster.height, raster.width
        )));
    }
    if a == 1 {
        return extract_local(raster, p);
    }
    let (r0, c0) = context_window_origin(p, a, raster.height, raster.width);
    let a_us = a as usize;
    let norm = 1.0 / (a_us * a_us) as f64;
    let mut out = Raster::zeros(raster.channels, p.h, p.w);
    out.origin = (raster.origin.0 + r0, raster.origin.1 + c0);
    for c in 0..raster.channels {
        for orow in 0..p.h {
            for ocol in 0..p.w {
                let mut acc = 0.0;
                for dr in 0..a_us {
                    let sr = r0 + (orow * a_us + dr) as i64;
                    for dc in 0..a_us {
                        let sc = c0 + (ocol * a_us + dc) as i64;
                        acc += raster.get_clamped(c, sr, sc);
                    }
                }
                out.set(c, orow, ocol, acc * norm);
            }
        }
    }
    Ok(out)
}

/// Area-average the whole raster down to `h_t x w_t`.
///
/// Output cell `(i,j)` averages the source rectangle
/// `[i*H/h_t, (i+1)*H/h_t) x [j*W/w_t, (j+1)*W/w_t)` with exact fractional
/// edge weights, so the filter is a true box filter for any size ratio.
pub fn make_thumbnail(raster: &Raster, h_t: usize, w_t: usize) -> Result<Raster> {
    if h_t == 0 || w_t == 0 || h_t > raster.height || w_t > raster.width {
        return Err(Error::Dimension(format!(
            "thumbnail {h_t}x{w_t} invalid for raster {}x{}",
            raster.height, raster.width
        )));
    }
    let row_spans = axis_spans(raster.height, h_t);
    let col_spans = axis_spans(raster.width, w_t);
    let mut out = Raster::zeros(raster.channels, h_t, w_t);
    for c in 0..raster.channels {
        for (i, (rs, re)) in row_spans.iter().enumerate() {
            for (j, (cs, ce)) in col_spans.iter().enumerate() {
                let mut acc = 0.0;
                let mut area = 0.0;
                let mut r = *rs;
                while r < *re {
                    let r_next = (r.floor() + 1.0).min(*re);
                    let wr = r_next - r;
                    let rr = r.floor() as usize;
                    let mut cc = *cs;
                    while cc < *ce {
                        let c_next = (cc.floor() + 1.0).min(*ce);
                        let wc = c_next - cc;
                        acc += raster.get(c, rr, cc.floor() as usize) * wr * wc;
                        area += wr * wc;
                        cc = c_next;
                    }
                    r = r_next;
                }
                out.set(c, i, j, acc / area);
            }
        }
    }
    Ok(out)
}

/// `[start, end)` spans of each output cell along one axis, in source pixels.
fn axis_spans(extent: usize, cells: usize) -> Vec<(f64, f64)> {
    (0..cells)
        .map(|i| {
            let s = i as f64 * extent as f64 / cells as f64;
            let e = (i + 1) as f64 * extent as f64 / cells as f64;
            (s, e)
        })
        .collect()
}

/// Binary mask at thumbnail resolution marking the patch footprint.
/// A mask pixel is set iff its source footprint intersects the patch
/// rectangle; the test is exact integer arithmetic.
pub fn make_position_mask(
    p: &PatchSpec,
    raster_hw: (usize, usize),
    thumb_hw: (usize, usize),
) -> BinaryMask {
    let (rh, rw) = raster_hw;
    let (th, tw) = thumb_hw;
    let mut mask = BinaryMask::zeros(th, tw);
    for i in 0..th {
        // cell i covers source rows [i*rh/th, (i+1)*rh/th)
        let intersects_rows = i * rh < (p.row + p.h) * th && (i + 1) * rh > p.row * th;
        if !intersects_rows {
            continue;
        }
        for j in 0..tw {
            let intersects_cols = j * rw < (p.col + p.w) * tw && (j + 1) * rw > p.col * tw;
            if intersects_cols {
                mask.data[i * tw + j] = 1;
            }
        }
    }
    mask
}

/// Per-pixel class probabilities over a patch or a whole raster.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// `[K, H, W]` row-major.
    pub data: Vec<f64>,
}

impl ProbMap {
    pub fn new(classes: usize, height: usize, width: usize) -> Self {
        ProbMap { classes, height, width, data: vec![0.0; classes * height * width] }
    }

    #[inline]
    pub fn get(&self, k: usize, r: usize, c: usize) -> f64 {
        self.data[(k * self.height + r) * self.width + c]
    }

    /// Per-pixel argmax; ties break toward the lowest class index.
    pub fn argmax_mask(&self) -> LabelMask {
        let mut out = LabelMask::zeros(self.height, self.width, self.classes);
        let plane = self.height * self.width;
        for pos in 0..plane {
            let mut best = 0usize;
            let mut best_v = self.data[pos];
            for k in 1..self.classes {
                let v = self.data[k * plane + pos];
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            out.data[pos] = best as u8;
        }
        out
    }
}

/// Average per-pixel class probabilities over all covering patches, then
/// take the per-pixel argmax (ties toward the lowest class index).
pub fn stitch(predictions: &[(PatchSpec, ProbMap)], raster_hw: (usize, usize)) -> Result<LabelMask> {
    let (rh, rw) = raster_hw;
    if predictions.is_empty() {
        return Err(Error::Coverage("no predictions to stitch".into()));
    }
    let classes = predictions[0].1.classes;
    let plane = rh * rw;
    let mut acc = vec![0.0f64; classes * plane];
    let mut cover = vec![0u32; plane];
    for (p, probs) in predictions {
        if probs.classes != classes {
            return Err(Error::Dimension("mixed class counts in stitch".into()));
        }
        if probs.height != p.h || probs.width != p.w {
            return Err(Error::Dimension(format!(
                "prediction {}x{} does not match patch {}x{}",
                probs.height, probs.width, p.h, p.w
            )));
        }
        if p.row + p.h > rh || p.col + p.w > rw {
            return Err(Error::Dimension("patch outside raster in stitch".into()));
        }
        for r in 0..p.h {
            let orow = p.row + r;
            for c in 0..p.w {
                let pos = orow * rw + p.col + c;
                cover[pos] += 1;
                for k in 0..classes {
                    acc[k * plane + pos] += probs.get(k, r, c);
                }
            }
        }
    }
    if let Some(pos) = cover.iter().position(|&n| n == 0) {
        return Err(Error::Coverage(format!(
            "pixel ({}, {}) not covered by any patch",
            pos / rw,
            pos % rw
        )));
    }
    let mut out = LabelMask::zeros(rh, rw, classes);
    for pos in 0..plane {
        let n = cover[pos] as f64;
        let mut best = 0usize;
        let mut best_v = acc[pos] / n;
        for k in 1..classes {
            let v = acc[k * plane + pos] / n;
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        out.data[pos] = best as u8;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_raster(c: usize, h: usize, w: usize) -> Raster {
        let mut r = Raster::zeros(c, h, w);
        let n = (c * h * w) as f64;
        for (i, v) in r.data.iter_mut().enumerate() {
            *v = i as f64 / n;
        }
        r
    }

    #[test]
    fn grid_exact_division() {
        let r = Raster::zeros(1, 1024, 1024);
        let g = build_grid(&r, 512, 512).unwrap();
        let anchors: Vec<(usize, usize)> = g.patches.iter().map(|p| (p.row, p.col)).collect();
        assert_eq!(anchors, vec![(0, 0), (0, 512), (512, 0), (512, 512)]);
    }

    #[test]
    fn grid_edge_anchored_overlap() {
        let r = Raster::zeros(1, 1000, 1000);
        let g = build_grid(&r, 512, 512).unwrap();
        let anchors: Vec<(usize, usize)> = g.patches.iter().map(|p| (p.row, p.col)).collect();
        assert_eq!(anchors, vec![(0, 0), (0, 488), (488, 0), (488, 488)]);
    }

    #[test]
    fn grid_single_patch() {
        let r = Raster::zeros(3, 512, 512);
        let g = build_grid(&r, 512, 512).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.patches[0], PatchSpec::new(0, 0, 512, 512));
    }

    #[test]
    fn grid_patch_larger_than_raster_errors() {
        let r = Raster::zeros(1, 100, 100);
        assert!(matches!(build_grid(&r, 128, 64), Err(Error::Dimension(_))));
    }

    #[test]
    fn extract_local_full_is_identity() {
        let r = ramp_raster(2, 8, 6);
        let p = PatchSpec::new(0, 0, 8, 6);
        let out = extract_local(&r, &p).unwrap();
        assert_eq!(out.data, r.data);
    }

    #[test]
    fn extract_local_single_pixel() {
        let mut r = Raster::zeros(1, 2, 2);
        r.set(0, 0, 0, 0.25);
        let out = extract_local(&r, &PatchSpec::new(0, 0, 1, 1)).unwrap();
        assert_eq!(out.data, vec![0.25]);
    }

    #[test]
    fn extract_local_roundtrip_region() {
        let r = ramp_raster(1, 10, 10);
        let p = PatchSpec::new(3, 4, 4, 5);
        let crop = extract_local(&r, &p).unwrap();
        for rr in 0..4 {
            for cc in 0..5 {
                assert_eq!(crop.get(0, rr, cc), r.get(0, 3 + rr, 4 + cc));
            }
        }
        assert_eq!(crop.origin, (3, 4));
    }

    #[test]
    fn extract_local_out_of_bounds_errors() {
        let r = Raster::zeros(1, 8, 8);
        assert!(extract_local(&r, &PatchSpec::new(5, 0, 4, 4)).is_err());
    }

    #[test]
    fn context_scale_one_equals_local() {
        let r = ramp_raster(3, 16, 16);
        let p = PatchSpec::new(4, 8, 8, 8);
        let local = extract_local(&r, &p).unwrap();
        let ctx = extract_context(&r, &p, 1).unwrap();
        assert_eq!(local, ctx);
    }

    #[test]
    fn context_corner_window_translates() {
        // patch at (0,0) size 512 in a 1024 raster, a=2: ideal rows
        // [-256, 768) translate to [0, 1024)
        let (r0, c0) = context_window_origin(&PatchSpec::new(0, 0, 512, 512), 2, 1024, 1024);
        assert_eq!((r0, c0), (0, 0));
        // centered patch stays centered
        let (r0, c0) = context_window_origin(&PatchSpec::new(256, 256, 512, 512), 2, 1024, 1024);
        assert_eq!((r0, c0), (0, 0));
        // far corner
        let (r0, c0) = context_window_origin(&PatchSpec::new(512, 512, 512, 512), 2, 1024, 1024);
        assert_eq!((r0, c0), (0, 0));
    }

    #[test]
    fn context_box_filter_mean() {
        // 2x2 block [1,3;5,7] downsampled by 2 -> 4.0; values scaled into [0,1]
        let mut r = Raster::zeros(1, 2, 2);
        r.data = vec![0.1, 0.3, 0.5, 0.7];
        let p = PatchSpec::new(0, 0, 1, 1);
        let ctx = extract_context(&r, &p, 2).unwrap();
        assert!((ctx.data[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn context_window_exceeding_raster_replicates() {
        // 4x4 raster, patch 2x2, a=4 -> window 8x8 > raster: edge replicate
        let r = ramp_raster(1, 4, 4);
        let p = PatchSpec::new(1, 1, 2, 2);
        let ctx = extract_context(&r, &p, 4).unwrap();
        assert_eq!(ctx.height, 2);
        assert_eq!(ctx.width, 2);
        assert!(ctx.data.iter().all(|v| v.is_finite()));
        let (r0, _) = context_window_origin(&p, 4, 4, 4);
        assert!(r0 < 0);
    }

    #[test]
    fn thumbnail_identity_and_constant() {
        let r = ramp_raster(1, 6, 6);
        let t = make_thumbnail(&r, 6, 6).unwrap();
        assert_eq!(t.data, r.data);

        let mut c = Raster::zeros(2, 9, 7);
        c.data.iter_mut().for_each(|v| *v = 0.375);
        let t = make_thumbnail(&c, 4, 3).unwrap();
        assert!(t.data.iter().all(|&v| (v - 0.375).abs() < 1e-12));
    }

    #[test]
    fn thumbnail_block_means() {
        // 4x4 of 2x2 constant blocks [0,1;1,0] -> 2x2 thumbnail equal to blocks
        let mut r = Raster::zeros(1, 4, 4);
        for rr in 0..4 {
            for cc in 0..4 {
                let v = if (rr / 2 + cc / 2) % 2 == 1 { 1.0 } else { 0.0 };
                r.set(0, rr, cc, v);
            }
        }
        let t = make_thumbnail(&r, 2, 2).unwrap();
        assert_eq!(t.data, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn position_mask_full_patch() {
        let p = PatchSpec::new(0, 0, 64, 64);
        let m = make_position_mask(&p, (64, 64), (16, 16));
        assert_eq!(m.popcount(), 256);
    }

    #[test]
    fn position_mask_proportional() {
        let p = PatchSpec::new(0, 0, 512, 512);
        let m = make_position_mask(&p, (1024, 1024), (64, 64));
        assert_eq!(m.popcount(), 1024);
        for i in 0..64 {
            for j in 0..64 {
                assert_eq!(m.get(i, j), i < 32 && j < 32);
            }
        }
    }

    #[test]
    fn position_masks_disjoint_patches() {
        let a = make_position_mask(&PatchSpec::new(0, 0, 256, 256), (1024, 1024), (32, 32));
        let b = make_position_mask(&PatchSpec::new(768, 768, 256, 256), (1024, 1024), (32, 32));
        let overlap = a.data.iter().zip(&b.data).filter(|(x, y)| **x != 0 && **y != 0).count();
        assert_eq!(overlap, 0);
    }

    #[test]
    fn stitch_non_overlapping_equals_per_patch_argmax() {
        let mut pa = ProbMap::new(2, 1, 1);
        pa.data = vec![0.9, 0.1];
        let mut pb = ProbMap::new(2, 1, 1);
        pb.data = vec![0.2, 0.8];
        let preds = vec![
            (PatchSpec::new(0, 0, 1, 1), pa),
            (PatchSpec::new(0, 1, 1, 1), pb),
        ];
        let out = stitch(&preds, (1, 2)).unwrap();
        assert_eq!(out.data, vec![0, 1]);
    }

    #[test]
    fn stitch_identical_overlap_is_idempotent() {
        let mut p1 = ProbMap::new(2, 2, 2);
        p1.data = vec![0.7, 0.7, 0.1, 0.1, 0.3, 0.3, 0.9, 0.9];
        let preds1 = vec![(PatchSpec::new(0, 0, 2, 2), p1.clone())];
        let preds2 = vec![
            (PatchSpec::new(0, 0, 2, 2), p1.clone()),
            (PatchSpec::new(0, 0, 2, 2), p1),
        ];
        assert_eq!(stitch(&preds1, (2, 2)).unwrap(), stitch(&preds2, (2, 2)).unwrap());
    }

    #[test]
    fn stitch_averages_probabilities() {
        // probs (0.6,0.4) and (0.2,0.8) -> mean (0.4,0.6) -> class 1
        let mut p1 = ProbMap::new(2, 1, 1);
        p1.data = vec![0.6, 0.4];
        let mut p2 = ProbMap::new(2, 1, 1);
        p2.data = vec![0.2, 0.8];
        let preds = vec![
            (PatchSpec::new(0, 0, 1, 1), p1),
            (PatchSpec::new(0, 0, 1, 1), p2),
        ];
        let out = stitch(&preds, (1, 1)).unwrap();
        assert_eq!(out.data, vec![1]);
    }

    #[test]
    fn stitch_uncovered_pixel_errors() {
        let mut p1 = ProbMap::new(2, 1, 1);
        p1.data = vec![1.0, 0.0];
        let preds = vec![(PatchSpec::new(0, 0, 1, 1), p1)];
        assert!(matches!(stitch(&preds, (1, 2)), Err(Error::Coverage(_))));
    }

    #[test]
    fn majority_downsample_ties_to_lowest() {
        let m = LabelMask::from_data(2, 2, 3, vec![2, 1, 1, 2]).unwrap();
        let d = m.majority_downsample(2).unwrap();
        assert_eq!(d.data, vec![1]);
    }

    proptest! {
        #[test]
        fn grid_covers_every_pixel(h in 5usize..40, w in 5usize..40, ph in 2usize..10, pw in 2usize..10) {
            prop_assume!(ph <= h && pw <= w);
            let r = Raster::zeros(1, h, w);
            let g = build_grid(&r, ph, pw).unwrap();
            prop_assert_eq!(g.len(), h.div_ceil(ph) * w.div_ceil(pw));
            let mut covered = vec![false; h * w];
            for p in &g.patches {
                for rr in p.row..p.row + p.h {
                    for cc in p.col..p.col + p.w {
                        covered[rr * w + cc] = true;
                    }
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
        }

        #[test]
        fn context_one_is_local_bitexact(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let h = rng.gen_range(6..20);
            let w = rng.gen_range(6..20);
            let mut r = Raster::zeros(2, h, w);
            r.data.iter_mut().for_each(|v| *v = rng.gen());
            let ph = rng.gen_range(1..=h);
            let pw = rng.gen_range(1..=w);
            let p = PatchSpec::new(rng.gen_range(0..=h - ph), rng.gen_range(0..=w - pw), ph, pw);
            let local = extract_local(&r, &p).unwrap();
            let ctx = extract_context(&r, &p, 1).unwrap();
            prop_assert_eq!(local.data, ctx.data);
        }

        #[test]
        fn box_downsample_preserves_window_mean(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = rng.gen_range(2u32..5);
            let ph = rng.gen_range(1usize..5);
            let pw = rng.gen_range(1usize..5);
            // raster exactly the window size: window divides evenly, no clamping
            let h = ph * a as usize;
            let w = pw * a as usize;
            let mut r = Raster::zeros(1, h, w);
            r.data.iter_mut().for_each(|v| *v = rng.gen());
            let p = PatchSpec::new(
                (h - ph) / 2,
                (w - pw) / 2,
                ph,
                pw,
            );
            let (r0, c0) = context_window_origin(&p, a, h, w);
            prop_assert_eq!((r0, c0), (0, 0));
            let ctx = extract_context(&r, &p, a).unwrap();
            let src_mean: f64 = r.data.iter().sum::<f64>() / r.data.len() as f64;
            let ctx_mean: f64 = ctx.data.iter().sum::<f64>() / ctx.data.len() as f64;
            prop_assert!((src_mean - ctx_mean).abs() < 1e-12);
        }

        #[test]
        fn position_mask_popcount_proportional(
            rh in 16usize..200, rw in 16usize..200,
            th in 4usize..32, tw in 4usize..32,
            fr in 0.0f64..1.0, fc in 0.0f64..1.0, fh in 0.05f64..1.0, fw in 0.05f64..1.0,
        ) {
            prop_assume!(th <= rh && tw <= rw);
            let h = ((rh as f64 * fh) as usize).max(1);
            let w = ((rw as f64 * fw) as usize).max(1);
            let row = ((rh - h) as f64 * fr) as usize;
            let col = ((rw - w) as f64 * fc) as usize;
            let p = PatchSpec::new(row, col, h, w);
            let m = make_position_mask(&p, (rh, rw), (th, tw));
            prop_assert!(m.popcount() >= 1);
            // proportional footprint plus at most one boundary cell per side
            let rows_set = (0..th).filter(|&i| (0..tw).any(|j| m.get(i, j))).count() as f64;
            let cols_set = (0..tw).filter(|&j| (0..th).any(|i| m.get(i, j))).count() as f64;
            let exp_rows = h as f64 * th as f64 / rh as f64;
            let exp_cols = w as f64 * tw as f64 / rw as f64;
            prop_assert!(rows_set >= exp_rows - 1.0 - 1e-9 && rows_set <= exp_rows + 2.0 + 1e-9);
            prop_assert!(cols_set >= exp_cols - 1.0 - 1e-9 && cols_set <= exp_cols + 2.0 + 1e-9);
        }

        #[test]
        fn stitch_one_hot_lossless(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let k = rng.gen_range(2usize..5);
            let (h, w, ph, pw) = (8usize, 6usize, 4usize, 3usize);
            let r = Raster::zeros(1, h, w);
            let g = build_grid(&r, ph, pw).unwrap();
            let mut truth = LabelMask::zeros(h, w, k);
            truth.data.iter_mut().for_each(|v| *v = rng.gen_range(0..k) as u8);
            let preds: Vec<(PatchSpec, ProbMap)> = g.patches.iter().map(|p| {
                let mut pm = ProbMap::new(k, ph, pw);
                for rr in 0..ph {
                    for cc in 0..pw {
                        let cls = truth.get(p.row + rr, p.col + cc) as usize;
                        pm.data[(cls * ph + rr) * pw + cc] = 1.0;
                    }
                }
                (*p, pm)
            }).collect();
            let out = stitch(&preds, (h, w)).unwrap();
            prop_assert_eq!(out.data, truth.data);
        }
    }
}
