use std::fmt;

use crate::error::{Error, Result};

/// `K×K` pixel counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            k: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/label pair. Pixels labelled `ignore_index` are
    /// skipped; any other label or prediction outside `[0, K)` is an error
    /// and leaves the matrix unchanged.
    pub fn accumulate(&mut self, pred: &[u32], gt: &[u32], ignore_index: u32) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::dim("confusion", format!("{} predictions for {} labels", pred.len(), gt.len())));
        }
        let k = self.k as u32;
        if let Some((i, &v)) = gt.iter().enumerate().find(|&(_, &v)| v != ignore_index && v >= k) {
            return Err(Error::Data(format!("label {v} at pixel {i} is outside [0, {k})")));
        }
        if let Some((i, v)) = pred.iter().zip(gt).enumerate().find_map(|(i, (&p, &g))| (g != ignore_index && p >= k).then_some((i, p))) {
            return Err(Error::Data(format!("prediction {v} at pixel {i} is outside [0, {k})")));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g != ignore_index {
                self.counts[g as usize * self.k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::dim("confusion", format!("cannot merge {} classes into {}", other.k, self.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Classes absent from both labels and predictions get `None` IoU;
    /// classes absent from the labels get `None` accuracy.
    pub fn metrics(&self) -> Metrics {
        let k = self.k;
        let mut iou = Vec::with_capacity(k);
        let mut acc = Vec::with_capacity(k);
        let mut correct = 0u64;
        for c in 0..k {
            let tp = self.get(c, c);
            let gt_total: u64 = (0..k).map(|p| self.get(c, p)).sum();
            let pred_total: u64 = (0..k).map(|g| self.get(g, c)).sum();
            let union = gt_total + pred_total - tp;
            iou.push((union > 0).then(|| tp as f64 / union as f64));
            acc.push((gt_total > 0).then(|| tp as f64 / gt_total as f64));
            correct += tp;
        }
        let mean = |v: &[Option<f64>]| {
            let present: Vec<f64> = v.iter().flatten().copied().collect();
            if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 }
        };
        let total = self.total();
        Metrics {
            miou: mean(&iou),
            macc: mean(&acc),
            aacc: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            per_class_iou: iou,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub miou: f64,
    pub macc: f64,
    pub aacc: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mIoU={:.4} mAcc={:.4} aAcc={:.4}", self.miou, self.macc, self.aacc)
    }
}
