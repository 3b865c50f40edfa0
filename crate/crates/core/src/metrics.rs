//! Binary segmentation scores: pixel accuracy, mean accuracy, mean IoU and
//! foreground IoU, all derived from a two-class confusion count.

use std::iter::Sum;
use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::BinaryMask;
use crate::scalar::Scalar;

/// Pixel counts of a prediction against ground truth, per class.
///
/// `cf`/`cb` are correctly labelled foreground/background pixels, `f`/`b` the
/// ground-truth class sizes, and `fp_*`/`fn_*` the per-class false positives
/// and negatives (`fp_f == fn_b`, `fp_b == fn_f`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub cf: u64,
    pub cb: u64,
    pub f: u64,
    pub b: u64,
    pub fp_f: u64,
    pub fn_f: u64,
    pub fp_b: u64,
    pub fn_b: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.f + self.b
    }

    /// The same counts with foreground and background exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            cf: self.cb,
            cb: self.cf,
            f: self.b,
            b: self.f,
            fp_f: self.fp_b,
            fn_f: self.fn_b,
            fp_b: self.fp_f,
            fn_b: self.fn_f,
        }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            cf: self.cf + o.cf,
            cb: self.cb + o.cb,
            f: self.f + o.f,
            b: self.b + o.b,
            fp_f: self.fp_f + o.fp_f,
            fn_f: self.fn_f + o.fn_f,
            fp_b: self.fp_b + o.fp_b,
            fn_b: self.fn_b + o.fn_b,
        }
    }
}

impl Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimensionMismatch {
            expected: gt.dims(),
            actual: pred.dims(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        match (p, g) {
            (true, true) => c.cf += 1,
            (false, false) => c.cb += 1,
            (true, false) => c.fp_f += 1,
            (false, true) => c.fn_f += 1,
        }
    }
    c.f = c.cf + c.fn_f;
    c.b = c.cb + c.fp_f;
    c.fp_b = c.fn_f;
    c.fn_b = c.fp_f;
    Ok(c)
}

fn ratio<T: Scalar>(num: u64, den: u64) -> T {
    T::from_f64_lossy(num as f64) / T::from_f64_lossy(den as f64)
}

/// `(Cf + Cb) / (F + B)`.
pub fn pixel_accuracy<T: Scalar>(c: &ConfusionCounts) -> Result<T> {
    if c.total() == 0 {
        return Err(Error::InvalidArgument("pixel accuracy of an empty image".into()));
    }
    Ok(ratio(c.cf + c.cb, c.total()))
}

/// A class absent from the ground truth scores 1 when also absent from the
/// prediction and 0 otherwise.
fn class_accuracy<T: Scalar>(correct: u64, size: u64, false_pos: u64) -> T {
    match (size, false_pos) {
        (0, 0) => T::one(),
        (0, _) => T::zero(),
        _ => ratio(correct, size),
    }
}

fn class_iou<T: Scalar>(correct: u64, false_pos: u64, false_neg: u64) -> T {
    match correct + false_pos + false_neg {
        0 => T::one(),
        den => ratio(correct, den),
    }
}

/// `(Cf / F + Cb / B) / 2`.
pub fn mean_accuracy<T: Scalar>(c: &ConfusionCounts) -> T {
    let two = T::from_f64_lossy(2.0);
    (class_accuracy::<T>(c.cf, c.f, c.fp_f) + class_accuracy::<T>(c.cb, c.b, c.fp_b)) / two
}

/// Mean over both classes of `C / (C + FP + FN)`.
pub fn mean_iou<T: Scalar>(c: &ConfusionCounts) -> T {
    let two = T::from_f64_lossy(2.0);
    (class_iou::<T>(c.cf, c.fp_f, c.fn_f) + class_iou::<T>(c.cb, c.fp_b, c.fn_b)) / two
}

pub fn fg_iou_counts<T: Scalar>(c: &ConfusionCounts) -> T {
    class_iou(c.cf, c.fp_f, c.fn_f)
}

/// Foreground IoU of two masks; 1 when both are empty.
pub fn fg_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(fg_iou_counts(&confusion(pred, gt)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pixel_acc: f64,
    pub mean_acc: f64,
    pub mean_iou: f64,
    pub fg_iou: f64,
}

impl MetricsReport {
    pub fn from_counts(c: &ConfusionCounts) -> Result<Self> {
        Ok(Self {
            pixel_acc: pixel_accuracy(c)?,
            mean_acc: mean_accuracy(c),
            mean_iou: mean_iou(c),
            fg_iou: fg_iou_counts(c),
        })
    }

    pub fn evaluate(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        Self::from_counts(&confusion(pred, gt)?)
    }

    /// Per-image averaging; `None` for an empty slice.
    pub fn mean(reports: &[Self]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&Self) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(Self {
            pixel_acc: avg(|r| r.pixel_acc),
            mean_acc: avg(|r| r.mean_acc),
            mean_iou: avg(|r| r.mean_iou),
            fg_iou: avg(|r| r.fg_iou),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

/// Dataset report: per-image rows, their mean (the headline numbers) and the
/// scores of the pooled confusion counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: Vec<EvalRecord>,
    pub mean: MetricsReport,
    pub pooled: MetricsReport,
}

impl EvalReport {
    pub fn build(rows: Vec<(String, ConfusionCounts)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let pooled = MetricsReport::from_counts(&rows.iter().map(|(_, c)| *c).sum())?;
        let images = rows
            .into_iter()
            .map(|(id, c)| {
                Ok(EvalRecord {
                    id,
                    metrics: MetricsReport::from_counts(&c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let per_image: Vec<_> = images.iter().map(|r| r.metrics).collect();
        Ok(Self {
            mean: MetricsReport::mean(&per_image).expect("non-empty"),
            pooled,
            images,
        })
    }
}
