//! Multi-class losses over diagonal-Gaussian logit vectors.
//!
//! The expected softmax has no closed form, so the uncertainty term is a
//! Monte-Carlo estimate from reparameterized samples `l_t = mu + sigma * eps_t`
//! with `eps_t ~ N(0, I)`. Each pixel draws from its own random stream keyed
//! by `(seed, step, stream, pixel)` so results do not depend on evaluation
//! order or batch composition.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::loss::{check_shapes, clamp_log_var, GaussianLogitVec, LossBreakdown, LossValueGradVec};
use crate::maps::{GaussianLogitMap, LabelKind, TargetMask};
use crate::scalar::Scalar;

/// Default number of Monte-Carlo samples per pixel.
pub const DEFAULT_T_SAMPLES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McConfig {
    t_samples: usize,
    seed: u64,
}

impl McConfig {
    pub fn new(t_samples: usize, seed: u64) -> Result<Self> {
        if t_samples == 0 {
            return Err(Error::InvalidParameter("t_samples must be >= 1".into()));
        }
        Ok(Self { t_samples, seed })
    }

    pub fn t_samples(&self) -> usize {
        self.t_samples
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            t_samples: DEFAULT_T_SAMPLES,
            seed: 0,
        }
    }
}

/// Identifies which random substream a map evaluation draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StreamKey {
    /// Training step.
    pub step: u64,
    /// Image identifier.
    pub stream: u64,
}

#[inline]
/// Deterministic generator for one pixel.
pub fn pixel_rng(seed: u64, key: StreamKey, pixel: u64) -> ChaCha8Rng {
    crate::rng::derive_rng(seed, &[key.step, key.stream, pixel])
}

/// Draws a `t_samples x classes` block of standard normal noise, row-major.
pub fn draw_noise<T: Scalar, R: rand::Rng + ?Sized>(
    t_samples: usize,
    classes: usize,
    rng: &mut R,
) -> Vec<T> {
    (0..t_samples * classes)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z)
        })
        .collect()
}

fn logits_from_noise<T: Scalar>(g: &GaussianLogitVec<T>, noise: &[T]) -> Vec<Vec<T>> {
    let sd = g.std_devs();
    let c = g.classes();
    noise
        .chunks_exact(c)
        .map(|eps| (0..c).map(|k| g.mu()[k] + sd[k] * eps[k]).collect())
        .collect()
}

/// Draws `t_samples` logit vectors `mu + sigma * eps`.
pub fn sample_logits<T: Scalar, R: rand::Rng + ?Sized>(
    g: &GaussianLogitVec<T>,
    mc: &McConfig,
    rng: &mut R,
) -> Vec<Vec<T>> {
    let noise = draw_noise(mc.t_samples(), g.classes(), rng);
    logits_from_noise(g, &noise)
}

#[inline]
fn log_sum_exp<T: Scalar>(xs: impl Iterator<Item = T> + Clone) -> T {
    let m = xs.clone().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<T>().ln()
}

/// Plain softmax cross-entropy `-log softmax(mu)_y` with its mean gradient.
pub fn cross_entropy<T: Scalar>(mu: &[T], y: usize) -> LossValueGradVec<T> {
    let lse = log_sum_exp(mu.iter().copied());
    let d_mu = mu
        .iter()
        .enumerate()
        .map(|(c, &m)| {
            let q = (m - lse).exp();
            if c == y {
                q - T::one()
            } else {
                q
            }
        })
        .collect();
    LossValueGradVec {
        value: lse - mu[y],
        d_mu,
        d_log_var: vec![T::zero(); mu.len()],
    }
}

/// Monte-Carlo cross-entropy of the expected softmax for fixed noise
/// (`t_samples x classes`, row-major).
///
/// Value is `-(logsumexp_t(l_ty - logsumexp_c l_tc) - log T)`; gradients follow
/// the reparameterization with the noise held fixed.
pub fn mc_expected_ce_with_noise<T: Scalar>(
    g: &GaussianLogitVec<T>,
    y: usize,
    noise: &[T],
) -> LossValueGradVec<T> {
    let c = g.classes();
    debug_assert!(y < c && noise.len().is_multiple_of(c) && !noise.is_empty());
    let t_samples = noise.len() / c;
    let samples = logits_from_noise(g, noise);

    let mut log_p = Vec::with_capacity(t_samples);
    let mut probs = Vec::with_capacity(t_samples);
    for l in &samples {
        let lse = log_sum_exp(l.iter().copied());
        log_p.push(l[y] - lse);
        probs.push(l.iter().map(|&v| (v - lse).exp()).collect::<Vec<T>>());
    }
    let lse_t = log_sum_exp(log_p.iter().copied());
    let value = T::of(t_samples as f64).ln() - lse_t;

    let sd = g.std_devs();
    let half = T::of(0.5);
    let mut d_mu = vec![T::zero(); c];
    let mut d_log_var = vec![T::zero(); c];
    for t in 0..t_samples {
        let w = (log_p[t] - lse_t).exp();
        for k in 0..c {
            let indicator = if k == y { T::one() } else { T::zero() };
            let d_l = -w * (indicator - probs[t][k]);
            d_mu[k] += d_l;
            d_log_var[k] += d_l * noise[t * c + k] * sd[k] * half;
        }
    }
    for (k, d) in d_log_var.iter_mut().enumerate() {
        if !clamp_log_var(g.log_var()[k]).1 {
            *d = T::zero();
        }
    }
    LossValueGradVec {
        value,
        d_mu,
        d_log_var,
    }
}

/// Monte-Carlo cross-entropy drawing fresh noise from `rng`.
pub fn mc_expected_ce<T: Scalar, R: rand::Rng + ?Sized>(
    g: &GaussianLogitVec<T>,
    y: usize,
    mc: &McConfig,
    rng: &mut R,
) -> LossValueGradVec<T> {
    let noise = draw_noise(mc.t_samples(), g.classes(), rng);
    mc_expected_ce_with_noise(g, y, &noise)
}

/// Index of the largest mean, lowest index on ties.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Replaces `y` by the model's own class when any class variance exceeds `tau`.
pub fn flip_target<T: Scalar>(g: &GaussianLogitVec<T>, y: usize, tau: T) -> usize {
    if exceeds_threshold(g, tau) {
        argmax(g.mu())
    } else {
        y
    }
}

fn exceeds_threshold<T: Scalar>(g: &GaussianLogitVec<T>, tau: T) -> bool {
    g.variances().into_iter().fold(T::neg_infinity(), T::max) > tau
}

fn multiclass_setup<T: Scalar>(
    logits: &GaussianLogitMap<T>,
    targets: &TargetMask,
) -> Result<LossBreakdown<T>> {
    check_shapes(logits, targets)?;
    let c = logits.classes();
    if c < 2 {
        return Err(Error::ShapeMismatch(format!(
            "multi-class loss needs at least 2 logit channels, got {c}"
        )));
    }
    if targets.max_label() as usize >= c {
        return Err(Error::InvalidParameter(format!(
            "target class {} out of range for {c} classes",
            targets.max_label()
        )));
    }
    let mut out = LossBreakdown::new(c, logits.height(), logits.width());
    out.effective_target.copy_from_slice(targets.labels());
    Ok(out)
}

fn scatter<T: Scalar>(dst: &mut crate::tensor::TensorBuf<T>, p: usize, grad: &[T], scale: T) {
    let plane = dst.plane();
    for (k, &g) in grad.iter().enumerate() {
        dst.data_mut()[k * plane + p] = g * scale;
    }
}

/// Plain softmax cross-entropy on every pixel.
pub fn plain_ce_loss<T: Scalar>(
    logits: &GaussianLogitMap<T>,
    targets: &TargetMask,
) -> Result<LossBreakdown<T>> {
    let mut out = multiclass_setup(logits, targets)?;
    let n = logits.pixels();
    let scale = T::one() / T::of(n as f64);
    let mut total = T::zero();
    for p in 0..n {
        let g = logits.logit_vec(p);
        let term = cross_entropy(g.mu(), targets.labels()[p] as usize);
        total += term.value;
        scatter(&mut out.d_mu, p, &term.d_mu, scale);
    }
    out.loss = total * scale;
    Ok(out)
}

/// Gated multi-class uncertainty + bootstrapping loss over one map.
///
/// Pixel-perfect pixels and box-derived pixels outside every box get plain
/// cross-entropy. Box-derived pixels inside a box get the Monte-Carlo
/// uncertainty term (trains only log-variances) plus cross-entropy against the
/// bootstrapped target (trains only means).
pub fn composite_multiclass_loss<T: Scalar>(
    logits: &GaussianLogitMap<T>,
    targets: &TargetMask,
    tau: T,
    mc: &McConfig,
    key: StreamKey,
) -> Result<LossBreakdown<T>> {
    let mut out = multiclass_setup(logits, targets)?;
    let n = logits.pixels();
    let c = logits.classes();
    let scale = T::one() / T::of(n as f64);
    let mut total = T::zero();
    for p in 0..n {
        let g = logits.logit_vec(p);
        let y = targets.labels()[p] as usize;
        if targets.kinds()[p] == LabelKind::BoxDerived && targets.in_box()[p] {
            let mut rng = pixel_rng(mc.seed(), key, p as u64);
            let noise: Vec<T> = draw_noise(mc.t_samples(), c, &mut rng);
            let unc = mc_expected_ce_with_noise(&g, y, &noise);
            let flipped = exceeds_threshold(&g, tau);
            let y_star = if flipped { argmax(g.mu()) } else { y };
            let boot = cross_entropy(g.mu(), y_star);
            total += unc.value + boot.value;
            scatter(&mut out.d_mu, p, &boot.d_mu, scale);
            scatter(&mut out.d_log_var, p, &unc.d_log_var, scale);
            out.effective_target[p] = y_star as u8;
            if flipped {
                out.flipped[p] = true;
                out.weight[p] = T::zero();
            }
        } else {
            let term = cross_entropy(g.mu(), y);
            total += term.value;
            scatter(&mut out.d_mu, p, &term.d_mu, scale);
        }
    }
    out.loss = total * scale;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn vec_logit(mu: &[f64], var: &[f64]) -> GaussianLogitVec<f64> {
        GaussianLogitVec::new(mu.to_vec(), var.iter().map(|v| v.ln()).collect()).unwrap()
    }

    #[test]
    fn degenerate_variance_samples_equal_mean() {
        let g = GaussianLogitVec::<f64>::new(vec![0.3, -1.2, 2.0], vec![-30.0; 3]).unwrap();
        let mut rng = pixel_rng(7, StreamKey::default(), 0);
        for l in sample_logits(&g, &McConfig::default(), &mut rng) {
            for (a, b) in l.iter().zip(g.mu()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fixed_seed_gives_identical_samples() {
        let g = vec_logit(&[1.0, -1.0], &[4.0, 1.0]);
        let mc = McConfig::new(50, 3).unwrap();
        let key = StreamKey { step: 4, stream: 9 };
        let a = sample_logits(&g, &mc, &mut pixel_rng(3, key, 11));
        let b = sample_logits(&g, &mc, &mut pixel_rng(3, key, 11));
        assert_eq!(a, b);
        let c = sample_logits(&g, &mc, &mut pixel_rng(3, key, 12));
        assert_ne!(a, c);
    }

    #[test]
    fn sample_moments_within_standard_error() {
        let g = vec_logit(&[1.0, -1.0], &[4.0, 1.0]);
        let t = 100_000;
        let mc = McConfig::new(t, 1).unwrap();
        let samples = sample_logits(&g, &mc, &mut pixel_rng(1, StreamKey::default(), 0));
        for (c, (&mu, &var)) in [1.0f64, -1.0].iter().zip(&[4.0f64, 1.0]).enumerate() {
            let mean = samples.iter().map(|l| l[c]).sum::<f64>() / t as f64;
            let sv = samples.iter().map(|l| (l[c] - mean).powi(2)).sum::<f64>() / (t - 1) as f64;
            assert!((mean - mu).abs() <= 3.0 * f64::sqrt(var) / (t as f64).sqrt());
            assert!((sv - var).abs() <= 0.05 * var);
        }
    }

    #[test]
    fn zero_variance_uniform_logits_give_log_c() {
        let g = GaussianLogitVec::new(vec![0.0; 3], vec![-30.0; 3]).unwrap();
        for t in [1, 5, 20] {
            let mc = McConfig::new(t, 0).unwrap();
            for y in 0..3 {
                let out = mc_expected_ce(&g, y, &mc, &mut pixel_rng(0, StreamKey::default(), 1));
                assert_abs_diff_eq!(out.value, 3f64.ln(), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn zero_variance_equals_plain_cross_entropy() {
        let g = GaussianLogitVec::new(vec![0.4, -2.0, 1.5], vec![-30.0; 3]).unwrap();
        let mc = McConfig::new(7, 5).unwrap();
        for y in 0..3 {
            let out = mc_expected_ce(&g, y, &mc, &mut pixel_rng(5, StreamKey::default(), 2));
            assert_abs_diff_eq!(out.value, cross_entropy(g.mu(), y).value, epsilon = 1e-6);
        }
    }

    #[test]
    fn flip_rule() {
        // equal to tau: unchanged
        let g = vec_logit(&[0.1, 5.0], &[0.1, 2.5]);
        assert_eq!(flip_target(&g, 0, 2.5), 0);
        let g = vec_logit(&[0.1, 5.0], &[0.1, 3.0]);
        assert_eq!(flip_target(&g, 0, 2.5), 1);
        let g = GaussianLogitVec::new(vec![9.0, -3.0, 4.0], vec![-30.0; 3]).unwrap();
        assert_eq!(flip_target(&g, 2, 2.5), 2);
        // ties go to the lowest index
        let g = vec_logit(&[0.2, 0.9, 0.9], &[5.0, 5.0, 5.0]);
        assert_eq!(flip_target(&g, 0, 2.5), 1);
    }

    #[test]
    fn composite_rejects_out_of_range_targets() {
        let logits = GaussianLogitMap::<f64>::zeros(3, 2, 2);
        let t = TargetMask::uniform(2, 2, LabelKind::PixelPerfect, vec![0, 1, 3, 0], vec![false; 4])
            .unwrap();
        let err = composite_multiclass_loss(&logits, &t, 2.5, &McConfig::default(), StreamKey::default());
        assert!(matches!(err, Err(Error::InvalidParameter(_))));
        let binary = GaussianLogitMap::<f64>::zeros(1, 2, 2);
        let t = TargetMask::uniform(2, 2, LabelKind::PixelPerfect, vec![0; 4], vec![false; 4]).unwrap();
        assert!(plain_ce_loss(&binary, &t).is_err());
    }

    #[test]
    fn flipped_pixel_bootstraps_to_argmax() {
        let mut logits = GaussianLogitMap::<f64>::zeros(3, 1, 1);
        logits.mu_mut().data_mut().copy_from_slice(&[2.0, -1.0, 0.5]);
        logits.log_var_mut().data_mut().copy_from_slice(&[0.0, 3.0f64.ln(), -1.0]);
        let t = TargetMask::uniform(1, 1, LabelKind::BoxDerived, vec![1], vec![true]).unwrap();
        let mc = McConfig::default();
        let key = StreamKey { step: 2, stream: 1 };
        let out = composite_multiclass_loss(&logits, &t, 2.5, &mc, key).unwrap();
        assert!(out.flipped[0]);
        assert_eq!(out.effective_target[0], 0);
        let g = logits.logit_vec(0);
        let noise: Vec<f64> = draw_noise(mc.t_samples(), 3, &mut pixel_rng(mc.seed(), key, 0));
        let unc = mc_expected_ce_with_noise(&g, 1, &noise).value;
        let boot = cross_entropy(g.mu(), 0).value;
        assert_abs_diff_eq!(out.loss, unc + boot, epsilon = 1e-15);
        assert_eq!(out.flip_mask(&t, 1), vec![true]);
    }
}
