//! Overlap metrics on integer label masks.

use ndarray::{Array2, ArrayView2, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Element;

pub const METRICS_FORMAT_VERSION: u32 = 1;

fn counts(pred: ArrayView2<u8>, gt: ArrayView2<u8>, class: u8) -> (usize, usize, usize) {
    let (mut inter, mut np, mut ng) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (a, b) = (p == class, g == class);
        inter += (a && b) as usize;
        np += a as usize;
        ng += b as usize;
    }
    (inter, np, ng)
}

fn check_same(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    Ok(())
}

/// Dice similarity `2|P∩G| / (|P|+|G|)`; 1 when the class is absent from both.
pub fn dsc(pred: ArrayView2<u8>, gt: ArrayView2<u8>, class: u8) -> Result<f64> {
    check_same(pred, gt)?;
    let (i, p, g) = counts(pred, gt, class);
    Ok(if p + g == 0 { 1.0 } else { 2.0 * i as f64 / (p + g) as f64 })
}

/// Intersection over union; 1 when the class is absent from both.
pub fn iou(pred: ArrayView2<u8>, gt: ArrayView2<u8>, class: u8) -> Result<f64> {
    check_same(pred, gt)?;
    let (i, p, g) = counts(pred, gt, class);
    let union = p + g - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

/// Mean IoU over `classes`.
pub fn miou(pred: ArrayView2<u8>, gt: ArrayView2<u8>, classes: &[u8]) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::Input("miou needs at least one class".into()));
    }
    let mut s = 0.0;
    for &c in classes {
        s += iou(pred, gt, c)?;
    }
    Ok(s / classes.len() as f64)
}

/// Hard label masks from logits `[B, K, H, W]`: argmax for K ≥ 2, positive
/// logit for a single channel.
pub fn predict_masks<T: Element>(logits: ArrayView4<T>) -> Vec<Array2<u8>> {
    let k = logits.shape()[1];
    logits
        .axis_iter(Axis(0))
        .map(|img| {
            let (h, w) = (img.shape()[1], img.shape()[2]);
            Array2::from_shape_fn((h, w), |(r, c)| {
                if k == 1 {
                    (img[[0, r, c]] > T::zero()) as u8
                } else {
                    let mut best = 0;
                    for j in 1..k {
                        if img[[j, r, c]] > img[[best, r, c]] {
                            best = j;
                        }
                    }
                    best as u8
                }
            })
        })
        .collect()
}

/// Foreground class ids scored for a model with `num_classes` outputs.
pub fn foreground_classes(num_classes: usize) -> Vec<u8> {
    if num_classes <= 1 {
        vec![1]
    } else {
        (1..num_classes as u8).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    pub class_names: Vec<String>,
    pub per_class_dsc: Vec<f64>,
    pub per_class_iou: Vec<f64>,
    pub mean_dsc: f64,
    pub mean_iou: f64,
}

/// Averages per-image scores over a test set.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    classes: Vec<u8>,
    dsc_sum: Vec<f64>,
    iou_sum: Vec<f64>,
    images: usize,
}

impl MetricsAccumulator {
    pub fn new(classes: Vec<u8>) -> Self {
        let n = classes.len();
        Self {
            classes,
            dsc_sum: vec![0.0; n],
            iou_sum: vec![0.0; n],
            images: 0,
        }
    }

    pub fn add(&mut self, pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<()> {
        for (k, &c) in self.classes.iter().enumerate() {
            self.dsc_sum[k] += dsc(pred, gt, c)?;
            self.iou_sum[k] += iou(pred, gt, c)?;
        }
        self.images += 1;
        Ok(())
    }

    pub fn images(&self) -> usize {
        self.images
    }

    /// Per-class means. `names` defaults to `class{id}` when shorter than the class list.
    pub fn report(&self, names: &[String]) -> Result<MetricsReport> {
        if self.images == 0 {
            return Err(Error::Data("no images were evaluated".into()));
        }
        let n = self.images as f64;
        let per_class_dsc: Vec<f64> = self.dsc_sum.iter().map(|s| s / n).collect();
        let per_class_iou: Vec<f64> = self.iou_sum.iter().map(|s| s / n).collect();
        let k = self.classes.len() as f64;
        Ok(MetricsReport {
            format_version: METRICS_FORMAT_VERSION,
            class_names: self
                .classes
                .iter()
                .enumerate()
                .map(|(i, c)| names.get(i).cloned().unwrap_or_else(|| format!("class{c}")))
                .collect(),
            mean_dsc: per_class_dsc.iter().sum::<f64>() / k,
            mean_iou: per_class_iou.iter().sum::<f64>() / k,
            per_class_dsc,
            per_class_iou,
        })
    }
}

impl MetricsReport {
    /// Plain-text table with percentages to two decimals.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12} {:>8} {:>8}\n", "class", "DSC%", "IoU%");
        for (i, name) in self.class_names.iter().enumerate() {
            s += &format!("{:<12} {:>8.2} {:>8.2}\n", name, 100.0 * self.per_class_dsc[i], 100.0 * self.per_class_iou[i]);
        }
        s += &format!("{:<12} {:>8.2} {:>8.2}\n", "mean", 100.0 * self.mean_dsc, 100.0 * self.mean_iou);
        s
    }
}
