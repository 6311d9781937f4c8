//! Segmentation metrics: confusion accumulation, mIoU, pixel accuracy, and a
//! flicker measure restricted to ground-truth-static pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::pipeline::PipelineConfig;
use crate::tensor::LabelMap;

/// `counts[g][p]`: pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// A new matrix with one frame's pixels added.
    pub fn accumulate(&self, pred: &LabelMap, gt: &LabelMap) -> Result<Self> {
        if !pred.same_shape(gt) || pred.num_classes() != self.num_classes {
            return Err(Error::domain(format!(
                "cannot compare {}x{} ({} classes) prediction with {}x{} ({} classes) ground truth in a {}-class matrix",
                pred.height(),
                pred.width(),
                pred.num_classes(),
                gt.height(),
                gt.width(),
                gt.num_classes(),
                self.num_classes
            )));
        }
        let mut out = self.clone();
        for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
            out.counts[g as usize * self.num_classes + p as usize] += 1;
        }
        Ok(out)
    }

    pub fn merge(&self, other: &ConfusionMatrix) -> Result<Self> {
        if other.num_classes != self.num_classes {
            return Err(Error::domain("merging confusion matrices of different size"));
        }
        Ok(Self {
            num_classes: self.num_classes,
            counts: self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
        })
    }

    /// Accumulates frame pairs (possibly concurrently) and merges the parts.
    pub fn from_frames(preds: &[LabelMap], gts: &[LabelMap], exec: Execution) -> Result<Self> {
        if preds.len() != gts.len() || preds.is_empty() {
            return Err(Error::domain(format!(
                "{} predictions for {} ground-truth frames",
                preds.len(),
                gts.len()
            )));
        }
        let c = gts[0].num_classes();
        exec.map_range(preds.len(), |t| ConfusionMatrix::new(c).accumulate(&preds[t], &gts[t]))
            .into_iter()
            .try_fold(ConfusionMatrix::new(c), |acc, part| acc.merge(&part?))
    }
}

/// Mean IoU over classes present in either ground truth or prediction.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::domain("mIoU of an empty confusion matrix"));
    }
    let c = cm.num_classes;
    let mut sum = 0.0;
    let mut present = 0usize;
    for k in 0..c {
        let tp = cm.get(k, k);
        let row: u64 = (0..c).map(|p| cm.get(k, p)).sum();
        let col: u64 = (0..c).map(|g| cm.get(g, k)).sum();
        let union = row + col - tp;
        if union > 0 {
            sum += tp as f64 / union as f64;
            present += 1;
        }
    }
    Ok(sum / present as f64)
}

pub fn pixel_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::domain("pixel accuracy of an empty confusion matrix"));
    }
    let trace: u64 = (0..cm.num_classes).map(|k| cm.get(k, k)).sum();
    Ok(trace as f64 / total as f64)
}

/// Marks pixels whose ground-truth label equals the label in each
/// neighbouring frame.
pub fn static_masks(gts: &[LabelMap]) -> Vec<Vec<bool>> {
    (0..gts.len())
        .map(|t| {
            let here = gts[t].labels();
            (0..here.len())
                .map(|px| {
                    let before = t == 0 || gts[t - 1].labels()[px] == here[px];
                    let after = t + 1 == gts.len() || gts[t + 1].labels()[px] == here[px];
                    before && after
                })
                .collect()
        })
        .collect()
}

/// Fraction of (pixel, adjacent-frame-pair) cases, over pixels static in
/// both frames, whose predicted label does not change.
pub fn temporal_consistency(preds: &[LabelMap], static_mask: &[Vec<bool>]) -> Result<f64> {
    if preds.len() < 2 {
        return Err(Error::domain("temporal consistency needs at least two frames"));
    }
    if static_mask.len() != preds.len() {
        return Err(Error::domain(format!(
            "{} static masks for {} frames",
            static_mask.len(),
            preds.len()
        )));
    }
    let cells = preds[0].labels().len();
    if preds.iter().any(|p| p.labels().len() != cells) || static_mask.iter().any(|m| m.len() != cells) {
        return Err(Error::domain("frames and static masks differ in size"));
    }
    let mut stable = 0u64;
    let mut considered = 0u64;
    for t in 0..preds.len() - 1 {
        let (a, b) = (preds[t].labels(), preds[t + 1].labels());
        for px in 0..cells {
            if static_mask[t][px] && static_mask[t + 1][px] {
                considered += 1;
                stable += u64::from(a[px] == b[px]);
            }
        }
    }
    if considered == 0 {
        return Err(Error::domain("no static pixels to measure temporal consistency on"));
    }
    Ok(stable as f64 / considered as f64)
}

/// Metrics for one run of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub temporal_consistency: f64,
    pub recovery: f64,
    pub config: PipelineConfig,
}
