//! Loss functions over Gaussian logits.
//!
//! Every per-pixel loss returns its value together with the partial
//! derivatives with respect to the logit mean `mu` and the log-variance
//! `s = log(sigma^2)`. Composite losses over whole maps apply gradient gating:
//! the uncertainty term only trains `s`, the bootstrap term only trains `mu`.

pub mod binary;
pub mod multiclass;

use crate::maps::TargetMask;
use crate::scalar::Scalar;
use crate::tensor::TensorBuf;

/// Log-variances are clamped into this range before use.
pub const LOG_VAR_MIN: f64 = -30.0;
pub const LOG_VAR_MAX: f64 = 30.0;

/// Default uncertainty threshold on sigma^2.
pub const DEFAULT_TAU: f64 = 2.5;
/// Default sharpness denominator of the bootstrap weight.
pub const DEFAULT_SLOPE: f64 = 0.2;

/// One Gaussian logit: mean and log-variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianLogit<T> {
    pub mu: T,
    pub log_var: T,
}

impl<T: Scalar> GaussianLogit<T> {
    pub fn new(mu: T, log_var: T) -> Self {
        Self { mu, log_var }
    }

    /// Log-variance after clamping, and whether it was inside the range
    /// (the derivative of the clamp is zero outside).
    #[inline]
    pub fn clamped_log_var(&self) -> (T, bool) {
        clamp_log_var(self.log_var)
    }

    /// sigma^2 of the clamped log-variance.
    #[inline]
    pub fn variance(&self) -> T {
        self.clamped_log_var().0.exp()
    }
}

#[inline]
pub(crate) fn clamp_log_var<T: Scalar>(s: T) -> (T, bool) {
    let lo = T::of(LOG_VAR_MIN);
    let hi = T::of(LOG_VAR_MAX);
    if s < lo {
        (lo, false)
    } else if s > hi {
        (hi, false)
    } else {
        (s, true)
    }
}

/// Class-score means with a diagonal covariance, one entry per class.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLogitVec<T> {
    mu: Vec<T>,
    log_var: Vec<T>,
}

impl<T: Scalar> GaussianLogitVec<T> {
    /// Requires at least two classes and equal lengths.
    pub fn new(mu: Vec<T>, log_var: Vec<T>) -> crate::Result<Self> {
        if mu.len() != log_var.len() {
            return Err(crate::Error::ShapeMismatch(format!(
                "{} means vs {} log-variances",
                mu.len(),
                log_var.len()
            )));
        }
        if mu.len() < 2 {
            return Err(crate::Error::InvalidParameter(
                "a multi-class logit needs at least two classes".into(),
            ));
        }
        Ok(Self { mu, log_var })
    }

    pub(crate) fn from_parts(mu: Vec<T>, log_var: Vec<T>) -> Self {
        debug_assert_eq!(mu.len(), log_var.len());
        Self { mu, log_var }
    }

    pub fn classes(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[T] {
        &self.mu
    }

    pub fn log_var(&self) -> &[T] {
        &self.log_var
    }

    /// Per-class sigma^2 after clamping.
    pub fn variances(&self) -> Vec<T> {
        self.log_var.iter().map(|&s| clamp_log_var(s).0.exp()).collect()
    }

    /// Per-class standard deviation after clamping.
    pub fn std_devs(&self) -> Vec<T> {
        self.log_var
            .iter()
            .map(|&s| (clamp_log_var(s).0 * T::of(0.5)).exp())
            .collect()
    }
}

/// Value and partial derivatives of a single-logit loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValueGrad<T> {
    pub value: T,
    pub d_mu: T,
    pub d_log_var: T,
}

/// Value and per-class partial derivatives of a multi-class loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValueGradVec<T> {
    pub value: T,
    pub d_mu: Vec<T>,
    pub d_log_var: Vec<T>,
}

/// Parameters of the smooth bootstrap weight `W = sigmoid((tau - sigma^2) / slope)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapParams<T> {
    tau: T,
    slope: T,
}

impl<T: Scalar> BootstrapParams<T> {
    pub fn new(tau: T, slope: T) -> crate::Result<Self> {
        if !(tau > T::zero()) || !(slope > T::zero()) {
            return Err(crate::Error::InvalidParameter(format!(
                "bootstrap tau and slope must be positive (got {tau}, {slope})"
            )));
        }
        Ok(Self { tau, slope })
    }

    pub fn tau(&self) -> T {
        self.tau
    }

    pub fn slope(&self) -> T {
        self.slope
    }
}

impl<T: Scalar> Default for BootstrapParams<T> {
    fn default() -> Self {
        Self {
            tau: T::of(DEFAULT_TAU),
            slope: T::of(DEFAULT_SLOPE),
        }
    }
}

/// Where box-derived pixels receive the uncertainty and bootstrap terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionMode {
    /// Every box-derived pixel.
    UncAll,
    /// Only box-derived pixels inside a box; the rest get plain losses.
    UncBoxOnly,
}

/// Reduced loss of one image plus per-pixel diagnostics and gated gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown<T> {
    /// Mean loss over pixels.
    pub loss: T,
    /// d loss / d mu, shape (classes, height, width).
    pub d_mu: TensorBuf<T>,
    /// d loss / d log-variance, shape (classes, height, width).
    pub d_log_var: TensorBuf<T>,
    /// Weight on the original target per pixel (1 where no bootstrapping applies).
    pub weight: Vec<T>,
    /// Pixels whose target is considered flipped.
    pub flipped: Vec<bool>,
    /// Target actually used by the mean-training term at each pixel.
    pub effective_target: Vec<u8>,
}

impl<T: Scalar> LossBreakdown<T> {
    pub(crate) fn new(classes: usize, height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            loss: T::zero(),
            d_mu: TensorBuf::zeros(classes, height, width),
            d_log_var: TensorBuf::zeros(classes, height, width),
            weight: vec![T::one(); n],
            flipped: vec![false; n],
            effective_target: vec![0; n],
        }
    }

    /// Flipped pixels whose original target was `class`.
    pub fn flip_mask(&self, targets: &TargetMask, class: u8) -> Vec<bool> {
        self.flipped
            .iter()
            .zip(targets.labels())
            .map(|(&f, &y)| f && y == class)
            .collect()
    }

    /// Fraction of pixels with a flipped target.
    pub fn flip_fraction(&self) -> f64 {
        if self.flipped.is_empty() {
            return 0.0;
        }
        self.flipped.iter().filter(|&&f| f).count() as f64 / self.flipped.len() as f64
    }
}

pub(crate) fn check_shapes<T: Scalar>(
    logits: &crate::maps::GaussianLogitMap<T>,
    targets: &TargetMask,
) -> crate::Result<()> {
    if logits.height() != targets.height() || logits.width() != targets.width() {
        return Err(crate::Error::ShapeMismatch(format!(
            "logits {}x{} vs targets {}x{}",
            logits.height(),
            logits.width(),
            targets.height(),
            targets.width()
        )));
    }
    if logits.pixels() == 0 {
        return Err(crate::Error::Empty("image has no pixels"));
    }
    Ok(())
}
