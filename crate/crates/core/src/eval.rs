//! Scene-completion and semantic segmentation metrics.
//!
//! Both metrics accumulate counts over any number of frames; reports are
//! computed from the totals.

use alloc::vec;
use alloc::vec::Vec;

use crate::coords::{labels, OccupancyGrid};
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompletionReport {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// True positives, predicted count and ground-truth count of occupied voxels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CompletionCounts {
    pub tp: u64,
    pub pred: u64,
    pub gt: u64,
}

impl CompletionCounts {
    pub fn new(tp: u64, pred: u64, gt: u64) -> Self {
        Self { tp, pred, gt }
    }

    pub fn merge(&mut self, other: &Self) {
        self.tp += other.tp;
        self.pred += other.pred;
        self.gt += other.gt;
    }

    /// Both sets empty is a perfect match; otherwise an empty denominator
    /// yields 0 for that metric.
    pub fn report(&self) -> CompletionReport {
        if self.pred == 0 && self.gt == 0 {
            return CompletionReport { iou: 1.0, precision: 1.0, recall: 1.0, f1: 1.0 };
        }
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.pred);
        let recall = ratio(self.tp, self.gt);
        let union = self.pred + self.gt - self.tp;
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        CompletionReport { iou: ratio(self.tp, union), precision, recall, f1 }
    }
}

/// Occupancy counts between two label grids. Voxels void in the ground
/// truth are not evaluated.
pub fn completion_counts(pred: &OccupancyGrid, gt: &OccupancyGrid) -> Result<CompletionCounts> {
    if pred.dims() != gt.dims() {
        bail!(Shape, "prediction grid {:?} vs ground truth {:?}", pred.dims(), gt.dims());
    }
    let mut c = CompletionCounts::default();
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if g == labels::VOID {
            continue;
        }
        let (po, go) = (labels::is_occupied(p), labels::is_occupied(g));
        c.pred += po as u64;
        c.gt += go as u64;
        c.tp += (po && go) as u64;
    }
    Ok(c)
}

/// Set-based metrics over two sets of equal-type voxel keys.
pub fn completion_metrics<K: Ord + Clone>(pred: &[K], gt: &[K]) -> CompletionReport {
    let mut p = pred.to_vec();
    let mut g = gt.to_vec();
    p.sort();
    p.dedup();
    g.sort();
    g.dedup();
    let (mut i, mut j, mut tp) = (0, 0, 0u64);
    while i < p.len() && j < g.len() {
        match p[i].cmp(&g[j]) {
            core::cmp::Ordering::Less => i += 1,
            core::cmp::Ordering::Greater => j += 1,
            core::cmp::Ordering::Equal => {
                tp += 1;
                i += 1;
                j += 1;
            }
        }
    }
    CompletionCounts::new(tp, p.len() as u64, g.len() as u64).report()
}

/// `classes x classes` confusion counts, rows indexed by ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, gt: usize, pred: usize) {
        self.counts[gt * self.classes + pred] += 1;
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            bail!(Shape, "confusion matrices over {} and {} classes", self.classes, other.classes);
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Adds every voxel whose ground truth is not void.
    pub fn accumulate(&mut self, pred: &OccupancyGrid, gt: &OccupancyGrid) -> Result<()> {
        if pred.dims() != gt.dims() {
            bail!(Shape, "prediction grid {:?} vs ground truth {:?}", pred.dims(), gt.dims());
        }
        for (i, (&p, &g)) in pred.labels().iter().zip(gt.labels()).enumerate() {
            if g == labels::VOID {
                continue;
            }
            if g as usize >= self.classes || p as usize >= self.classes {
                bail!(MalformedInput, "label {} or {} at voxel {} exceeds {} classes", g, p, i, self.classes);
            }
            self.add(g as usize, p as usize);
        }
        Ok(())
    }

    /// Per-class IoU, omitting classes in `exclude` from the mean. A class
    /// with no ground-truth and no predicted voxels is invalid.
    pub fn report(&self, exclude: &[u8]) -> SegmentationReport {
        let c = self.classes;
        let mut per_class = vec![None; c];
        let mut sum = 0.0;
        let mut n = 0;
        for k in 0..c {
            let tp = self.get(k, k);
            let gt_total: u64 = (0..c).map(|p| self.get(k, p)).sum();
            let pred_total: u64 = (0..c).map(|g| self.get(g, k)).sum();
            let union = gt_total + pred_total - tp;
            if union == 0 {
                continue;
            }
            let iou = tp as f64 / union as f64;
            per_class[k] = Some(iou);
            if !exclude.contains(&(k as u8)) {
                sum += iou;
                n += 1;
            }
        }
        SegmentationReport { per_class, miou: if n == 0 { 0.0 } else { sum / n as f64 }, confusion: self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationReport {
    /// `None` marks a class absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub confusion: Confusion,
}

/// Semantic mIoU of one frame. Void ground-truth voxels are skipped;
/// classes in `exclude` (by default free) still count as confusion rows and
/// columns, so predicting an object where the truth is free is a false
/// positive, but their own IoU is left out of the mean.
pub fn semantic_miou(pred: &OccupancyGrid, gt: &OccupancyGrid, exclude: &[u8]) -> Result<SegmentationReport> {
    let mut conf = Confusion::new(labels::NUM_CLASSES);
    conf.accumulate(pred, gt)?;
    Ok(conf.report(exclude))
}

pub const DEFAULT_EXCLUDE: [u8; 1] = [labels::FREE];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn completion_golden() {
        let r = completion_metrics(&[1, 2, 3], &[2, 3, 4, 5]);
        assert!((r.iou - 0.4).abs() < 1e-15);
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.recall - 0.5).abs() < 1e-15);
        assert!((r.f1 - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn completion_conventions() {
        let one = CompletionReport { iou: 1.0, precision: 1.0, recall: 1.0, f1: 1.0 };
        let zero = CompletionReport { iou: 0.0, precision: 0.0, recall: 0.0, f1: 0.0 };
        assert_eq!(completion_metrics::<u32>(&[], &[]), one);
        assert_eq!(completion_metrics(&[1, 2], &[1, 2]), one);
        assert_eq!(completion_metrics(&[1], &[2]), zero);
        assert_eq!(completion_metrics(&[], &[2]), zero);
    }

    fn grid(labels_: &[u8]) -> OccupancyGrid {
        OccupancyGrid::from_labels([labels_.len(), 1, 1], labels_.to_vec()).unwrap()
    }

    #[test]
    fn miou_two_class_toy() {
        // Class 1: TP 2, FP 1, FN 1. Class 2: TP 3, FP 1, FN 1.
        let gt = grid(&[1, 1, 1, 2, 2, 2, 2]);
        let pr = grid(&[1, 1, 2, 2, 2, 2, 1]);
        let r = semantic_miou(&pr, &gt, &DEFAULT_EXCLUDE).unwrap();
        assert_eq!(r.per_class[1], Some(0.5));
        assert_eq!(r.per_class[2], Some(0.6));
        assert!((r.miou - 0.55).abs() < 1e-15);
        assert_eq!(r.per_class[4], None);
    }

    #[test]
    fn miou_examples() {
        let gt = grid(&[4, 4, 17, 17]);
        assert_eq!(semantic_miou(&gt, &gt, &DEFAULT_EXCLUDE).unwrap().miou, 1.0);
        let wrong = grid(&[7, 7, 17, 17]);
        let r = semantic_miou(&wrong, &gt, &DEFAULT_EXCLUDE).unwrap();
        assert_eq!(r.per_class[4], Some(0.0));
        assert_eq!(r.per_class[7], Some(0.0));
        assert_eq!(r.miou, 0.0);
    }

    #[test]
    fn void_is_skipped() {
        let gt = grid(&[4, 255, 17]);
        let pr = grid(&[4, 7, 17]);
        let r = semantic_miou(&pr, &gt, &DEFAULT_EXCLUDE).unwrap();
        assert_eq!(r.confusion.total(), 2);
        assert_eq!(r.miou, 1.0);
        let c = completion_counts(&pr, &gt).unwrap();
        assert_eq!(c, CompletionCounts::new(1, 1, 1));
    }
}
