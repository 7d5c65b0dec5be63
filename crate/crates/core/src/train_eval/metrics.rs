use serde::{Deserialize, Serialize};

use crate::data::SegMap;
use crate::error::{shape_err, Error, Result};

/// `K×K` pixel counts, rows indexed by ground truth and columns by prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
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

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn add(&mut self, pred: &SegMap, gt: &SegMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(shape_err(
                "evaluate_miou",
                format!(
                    "prediction {}x{} vs ground truth {}x{}",
                    pred.height(),
                    pred.width(),
                    gt.height(),
                    gt.width()
                ),
            ));
        }
        pred.check_classes(self.num_classes)?;
        gt.check_classes(self.num_classes)?;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            self.counts[g as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class occurs in neither map.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let k = self.num_classes;
        let tp = self.count(class, class);
        let gt_total: u64 = (0..k).map(|p| self.count(class, p)).sum();
        let pred_total: u64 = (0..k).map(|g| self.count(g, class)).sum();
        let union = gt_total + pred_total - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes).map(|c| self.iou(c)).collect()
    }

    /// Mean IoU over classes present in the ground truth or the prediction.
    pub fn miou(&self) -> Option<f64> {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Evaluation summary. `per_class_iou` holds `None` for classes absent from
/// both ground truth and prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    /// mIoU at horizons `1..=h`, each over the same set of windows.
    pub per_horizon_miou: Vec<f64>,
    /// Mean training loss per epoch; empty for pure evaluations.
    pub loss_curve: Vec<f64>,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let miou = cm.miou().ok_or(Error::EmptyDataset)?;
        Ok(Self {
            per_class_iou: cm.per_class_iou(),
            miou,
            per_horizon_miou: vec![miou],
            loss_curve: Vec::new(),
        })
    }
}

/// Dataset-level IoU over all `(pred, gt)` pairs.
pub fn evaluate_miou(preds: &[SegMap], gts: &[SegMap], num_classes: usize) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if preds.len() != gts.len() {
        return Err(shape_err(
            "evaluate_miou",
            format!("{} predictions for {} ground-truth maps", preds.len(), gts.len()),
        ));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, g) in preds.iter().zip(gts) {
        cm.add(p, g)?;
    }
    MetricsReport::from_confusion(&cm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(rows: &[&[u8]]) -> SegMap {
        SegMap::new(rows.len(), rows[0].len(), rows.concat()).unwrap()
    }

    #[test]
    fn identical_maps_score_one() {
        let m = map(&[&[0, 1, 2], &[2, 2, 0]]);
        let r = evaluate_miou(std::slice::from_ref(&m), std::slice::from_ref(&m), 4).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.per_class_iou, vec![Some(1.0), Some(1.0), Some(1.0), None]);
    }

    #[test]
    fn hand_enumerated_two_by_two() {
        let pred = map(&[&[0, 0], &[1, 1]]);
        let gt = map(&[&[0, 1], &[1, 1]]);
        let r = evaluate_miou(&[pred], &[gt], 2).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_maps_score_zero() {
        let r = evaluate_miou(&[SegMap::filled(3, 3, 0)], &[SegMap::filled(3, 3, 1)], 3).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.0), Some(0.0), None]);
        assert_eq!(r.miou, 0.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(evaluate_miou(&[], &[], 3), Err(Error::EmptyDataset)));
        let a = SegMap::filled(2, 2, 0);
        let b = SegMap::filled(2, 3, 0);
        assert!(evaluate_miou(std::slice::from_ref(&a), &[b], 3).is_err());
        assert!(evaluate_miou(&[SegMap::filled(2, 2, 5)], &[a], 3).is_err());
    }
}
