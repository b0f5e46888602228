//! Segmentation metrics and the metrics history file.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::maps::GaussianLogitMap;
use crate::scalar::Scalar;

pub const METRICS_HEADER: &str = "step,loss,iou_c1,iou_c2,miou,sigma2_in_mask,sigma2_in_band,flip_frac";

/// `|pred ∩ true| / |pred ∪ true|` for one class, 1 when both sets are empty.
pub fn iou(pred: &[u8], truth: &[u8], class: u8) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} pixels, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    let counts = IouCounts::default().add(pred, truth, class);
    Ok(counts.iou())
}

/// Running intersection and union counts for dataset-level IoU.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    pub fn add(mut self, pred: &[u8], truth: &[u8], class: u8) -> Self {
        for (&p, &t) in pred.iter().zip(truth) {
            let (a, b) = (p == class, t == class);
            self.intersection += u64::from(a && b);
            self.union += u64::from(a || b);
        }
        self
    }

    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

/// Class decision per pixel from the means alone. One channel: foreground
/// iff `mu > 0`. Several channels: argmax with background as channel 0,
/// ties resolved to the lowest index.
pub fn predict_mask<T: Scalar>(logits: &GaussianLogitMap<T>) -> Vec<u8> {
    let c = logits.classes();
    let n = logits.pixels();
    let mu = logits.mu().data();
    if c == 1 {
        return mu.iter().map(|&m| u8::from(m > T::zero())).collect();
    }
    (0..n)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if mu[k * n + p] > mu[best * n + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// One row of the metrics history.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Mean batch loss over the steps since the previous record.
    pub loss: f64,
    /// Validation IoU for object classes 1, 2, ...
    pub iou: Vec<f64>,
    /// Mean of `iou`.
    pub miou: f64,
    /// Mean predicted variance over true object pixels.
    pub sigma2_in_mask: f64,
    /// Mean predicted variance over box pixels outside the true mask.
    pub sigma2_in_band: f64,
    /// Fraction of in-box validation pixels whose target would be flipped.
    pub flip_frac: f64,
}

impl MetricsRecord {
    /// CSV row matching [`METRICS_HEADER`]; absent classes are left empty.
    pub fn csv_row(&self) -> String {
        let cell = |i: usize| self.iou.get(i).map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.loss,
            cell(0),
            cell(1),
            self.miou,
            self.sigma2_in_mask,
            self.sigma2_in_band,
            self.flip_frac
        )
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}
