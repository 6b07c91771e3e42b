use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dab::DatasetId;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::segnet::SegModel;
use crate::tensor::{Labels, Tensor, IGNORE_INDEX};

/// Images per forward during evaluation.
pub const EVAL_BATCH: usize = 8;

/// `C x C` pixel counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::Dimension("confusion matrix must be square".into()));
        }
        Ok(Self { classes, counts: rows.concat() })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    /// Adds label/prediction pairs, skipping ignored labels.
    pub fn add(&mut self, labels: &[u8], preds: &[u8]) -> Result<()> {
        for (&t, &p) in labels.iter().zip(preds) {
            if t == IGNORE_INDEX {
                continue;
            }
            let (t, p) = (t as usize, p as usize);
            if t >= self.classes || p >= self.classes {
                return Err(Error::LabelRange { label: t.max(p) as u8, classes: self.classes });
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `TP / (TP + FP + FN)` per class, `None` for classes absent from both
    /// ground truth and prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..self.classes).map(|t| self.get(t, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::UndefinedMetric("no labeled pixels were evaluated".into()));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Evaluation result; `per_class_iou` maps class names to IoU, `null` for
/// classes excluded from the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub miou: f64,
    pub per_class_iou: BTreeMap<String, Option<f64>>,
    pub pixels: u64,
    pub confusion: ConfusionMatrix,
}

impl Metrics {
    pub fn from_confusion(confusion: ConfusionMatrix, class_names: &[String]) -> Result<Self> {
        let miou = confusion.miou()?;
        let per_class_iou = class_names.iter().cloned().zip(confusion.iou()).collect();
        Ok(Self { miou, per_class_iou, pixels: confusion.total(), confusion })
    }
}

/// Per-pixel argmax over the class axis of `[B, C, H, W]` logits; the lowest
/// class index wins ties.
pub fn argmax_classes(logits: &Tensor) -> Result<Vec<u8>> {
    let [b, c, h, w] = logits.dims4()?;
    let hw = h * w;
    let mut out = vec![0u8; b * hw];
    for n in 0..b {
        let img = &logits.data()[n * c * hw..(n + 1) * c * hw];
        for p in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if img[k * hw + p] > img[best * hw + p] {
                    best = k;
                }
            }
            out[n * hw + p] = best as u8;
        }
    }
    Ok(out)
}

/// Confusion matrix of one labeled batch under eval-mode prediction.
fn batch_confusion(model: &SegModel, images: &Tensor, labels: &Labels, id: DatasetId) -> Result<ConfusionMatrix> {
    let logits = model.predict(images, id)?;
    let mut cm = ConfusionMatrix::new(model.class_count(id)?);
    cm.add(labels.data(), &argmax_classes(&logits)?)?;
    Ok(cm)
}

/// Eval-mode mIoU of `model` with dataset id `id` over all of `dataset`.
pub fn evaluate(model: &SegModel, dataset: &Dataset, id: DatasetId) -> Result<Metrics> {
    evaluate_with(model, dataset, id, EVAL_BATCH)
}

pub fn evaluate_with(model: &SegModel, dataset: &Dataset, id: DatasetId, batch_size: usize) -> Result<Metrics> {
    let classes = model.class_count(id)?;
    if dataset.num_classes() != classes {
        return Err(Error::Config(format!(
            "dataset {} has {} classes, head {} predicts {classes}",
            dataset.name,
            dataset.num_classes(),
            id.0
        )));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let starts: Vec<usize> = (0..dataset.len()).step_by(batch_size).collect();
    let per_batch = model.exec().map(starts.len(), |i| {
        let idx: Vec<usize> = (starts[i]..(starts[i] + batch_size).min(dataset.len())).collect();
        let batch = Batch::from_indices(dataset, &idx, id);
        batch_confusion(model, &batch.images, &batch.labels, id)
    });
    let mut total = ConfusionMatrix::new(classes);
    for cm in per_batch {
        total.merge(&cm?);
    }
    Metrics::from_confusion(total, &dataset.class_names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_two_class_iou() {
        let cm = ConfusionMatrix::from_rows(&[vec![3, 1], vec![2, 4]]).unwrap();
        let iou = cm.iou();
        assert_eq!(iou[0], Some(0.5));
        assert!((iou[1].unwrap() - 4.0 / 7.0).abs() < 1e-15);
        assert!((cm.miou().unwrap() - 0.535_714_285_714_285_7).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_and_absent_classes() {
        let mut cm = ConfusionMatrix::new(4);
        cm.add(&[0, 1, 1, 255], &[0, 1, 1, 3]).unwrap();
        assert_eq!(cm.total(), 3);
        assert_eq!(cm.iou(), vec![Some(1.0), Some(1.0), None, None]);
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn all_ignored_is_undefined() {
        let mut cm = ConfusionMatrix::new(3);
        cm.add(&[255, 255], &[0, 1]).unwrap();
        assert!(matches!(cm.miou(), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        let logits = Tensor::new(vec![1, 3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_classes(&logits).unwrap(), vec![0, 1]);
    }
}
