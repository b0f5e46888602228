//! Per-pixel model outputs and training targets.

use crate::error::{Error, Result};
use crate::loss::{GaussianLogit, GaussianLogitVec};
use crate::scalar::Scalar;
use crate::tensor::TensorBuf;

/// Provenance of a training target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelKind {
    PixelPerfect,
    BoxDerived,
}

impl LabelKind {
    pub fn tag(self) -> &'static str {
        match self {
            LabelKind::PixelPerfect => "pp",
            LabelKind::BoxDerived => "bb",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "pp" => Some(LabelKind::PixelPerfect),
            "bb" => Some(LabelKind::BoxDerived),
            _ => None,
        }
    }
}

/// Class labels for one image plus where each label came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
    kinds: Vec<LabelKind>,
    in_box: Vec<bool>,
}

impl TargetMask {
    /// Builds a mask with per-pixel kinds.
    ///
    /// Box-derived foreground must lie inside a box.
    pub fn new(
        height: usize,
        width: usize,
        labels: Vec<u8>,
        kinds: Vec<LabelKind>,
        in_box: Vec<bool>,
    ) -> Result<Self> {
        let n = height * width;
        if labels.len() != n || kinds.len() != n || in_box.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "target mask {height}x{width} needs {n} entries per field"
            )));
        }
        for i in 0..n {
            if kinds[i] == LabelKind::BoxDerived && labels[i] != 0 && !in_box[i] {
                return Err(Error::InvalidParameter(format!(
                    "box-derived foreground at pixel {i} lies outside every box"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            labels,
            kinds,
            in_box,
        })
    }

    /// Same kind for every pixel.
    pub fn uniform(
        height: usize,
        width: usize,
        kind: LabelKind,
        labels: Vec<u8>,
        in_box: Vec<bool>,
    ) -> Result<Self> {
        Self::new(height, width, labels, vec![kind; height * width], in_box)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn kinds(&self) -> &[LabelKind] {
        &self.kinds
    }

    pub fn in_box(&self) -> &[bool] {
        &self.in_box
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

/// Gaussian logits for every class at every pixel, stored as two
/// (classes, height, width) planes.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLogitMap<T> {
    mu: TensorBuf<T>,
    log_var: TensorBuf<T>,
}

impl<T: Scalar> GaussianLogitMap<T> {
    pub fn new(mu: TensorBuf<T>, log_var: TensorBuf<T>) -> Result<Self> {
        if mu.shape() != log_var.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mean {:?} vs log-variance {:?}",
                mu.shape(),
                log_var.shape()
            )));
        }
        Ok(Self { mu, log_var })
    }

    pub fn zeros(classes: usize, height: usize, width: usize) -> Self {
        Self {
            mu: TensorBuf::zeros(classes, height, width),
            log_var: TensorBuf::zeros(classes, height, width),
        }
    }

    pub fn classes(&self) -> usize {
        self.mu.channels()
    }

    pub fn height(&self) -> usize {
        self.mu.height()
    }

    pub fn width(&self) -> usize {
        self.mu.width()
    }

    pub fn pixels(&self) -> usize {
        self.mu.plane()
    }

    pub fn mu(&self) -> &TensorBuf<T> {
        &self.mu
    }

    pub fn log_var(&self) -> &TensorBuf<T> {
        &self.log_var
    }

    pub fn mu_mut(&mut self) -> &mut TensorBuf<T> {
        &mut self.mu
    }

    pub fn log_var_mut(&mut self) -> &mut TensorBuf<T> {
        &mut self.log_var
    }

    /// Logit of class `c` at flat pixel index `p`.
    #[inline]
    pub fn logit(&self, c: usize, p: usize) -> GaussianLogit<T> {
        let plane = self.pixels();
        GaussianLogit::new(self.mu.data()[c * plane + p], self.log_var.data()[c * plane + p])
    }

    /// All class logits at flat pixel index `p`.
    pub fn logit_vec(&self, p: usize) -> GaussianLogitVec<T> {
        let plane = self.pixels();
        let c = self.classes();
        let mu = (0..c).map(|k| self.mu.data()[k * plane + p]).collect();
        let log_var = (0..c).map(|k| self.log_var.data()[k * plane + p]).collect();
        GaussianLogitVec::from_parts(mu, log_var)
    }
}
