//! Segmentation scoring and reward functions.
//!
//! `score = mIoU + mF1`, both means taken over classes that appear in the
//! truth or the prediction; classes absent from both are excluded (they
//! would be 0/0). The per-patch reward is the score gain of the chosen
//! scale's prediction over the local-only prediction, so acting locally
//! always earns exactly zero. The map reward is the same gain on the whole
//! stitched image, scaled by the number of patches, granted at episode end.

use crate::error::{Error, Result};
use crate::tiling::LabelMask;

/// K x K pixel counts; entry `(i, j)` counts pixels with truth `i`
/// predicted `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    #[inline]
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Exact confusion counts between two equally shaped masks.
pub fn confusion(truth: &LabelMask, pred: &LabelMask, classes: usize) -> Result<ConfusionMatrix> {
    if truth.height != pred.height || truth.width != pred.width {
        return Err(Error::Dimension(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            truth.height, truth.width, pred.height, pred.width
        )));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&t, &p) in truth.data.iter().zip(&pred.data) {
        if t as usize >= classes || p as usize >= classes {
            return Err(Error::Dimension(format!(
                "label {} out of range for {classes} classes",
                t.max(p)
            )));
        }
        cm.counts[t as usize * classes + p as usize] += 1;
    }
    Ok(cm)
}

/// Per-class (TP, FP, FN); `None` for classes absent from both masks.
fn class_stats(cm: &ConfusionMatrix) -> Vec<Option<(u64, u64, u64)>> {
    let k = cm.classes;
    (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let fp: u64 = (0..k).filter(|&t| t != c).map(|t| cm.get(t, c)).sum();
            let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
            if tp + fp + fn_ == 0 {
                None
            } else {
                Some((tp, fp, fn_))
            }
        })
        .collect()
}

fn mean_over_present(cm: &ConfusionMatrix, f: impl Fn(u64, u64, u64) -> f64) -> Result<f64> {
    let stats = class_stats(cm);
    let present: Vec<f64> = stats.iter().flatten().map(|&(tp, fp, fn_)| f(tp, fp, fn_)).collect();
    if present.is_empty() {
        return Err(Error::UndefinedScore("every class absent from truth and prediction".into()));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Mean intersection-over-union: per-class `TP / (TP + FP + FN)`.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    mean_over_present(cm, |tp, fp, fn_| tp as f64 / (tp + fp + fn_) as f64)
}

/// Mean F1: per-class `2TP / (2TP + FP + FN)`.
pub fn mf1(cm: &ConfusionMatrix) -> Result<f64> {
    mean_over_present(cm, |tp, fp, fn_| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// `mIoU + mF1`, in `[0, 2]`.
pub fn score(truth: &LabelMask, pred: &LabelMask) -> Result<f64> {
    let cm = confusion(truth, pred, truth.classes.max(pred.classes))?;
    Ok(miou(&cm)? + mf1(&cm)?)
}

/// Per-patch reward: score gain of the chosen-scale prediction over the
/// local-only prediction. Zero when the two coincide, negative when the
/// extra context hurt.
pub fn patch_reward(truth: &LabelMask, pred_scaled: &LabelMask, pred_local: &LabelMask) -> Result<f64> {
    if pred_scaled == pred_local {
        return Ok(0.0); // exact zero for the local baseline, no float residue
    }
    Ok(score(truth, pred_scaled)? - score(truth, pred_local)?)
}

/// Whole-map reward granted at the final timestep: `T` times the score gain
/// of the stitched map over the all-local stitched map.
pub fn map_reward(
    truth: &LabelMask,
    map_scaled: &LabelMask,
    map_local: &LabelMask,
    patches: usize,
) -> Result<f64> {
    if map_scaled == map_local {
        return Ok(0.0);
    }
    Ok(patches as f64 * (score(truth, map_scaled)? - score(truth, map_local)?))
}

/// Reward bookkeeping for one timestep of an episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardRecord {
    pub t: usize,
    pub action: u32,
    pub patch_reward: f64,
    /// Present only on the final timestep.
    pub map_bonus: Option<f64>,
}
