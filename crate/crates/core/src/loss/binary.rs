//! Single-foreground-class losses with closed-form gradients.

use crate::error::{Error, Result};
use crate::loss::{
    check_shapes, BootstrapParams, GaussianLogit, LossBreakdown, LossValueGrad, RegionMode,
};
use crate::maps::{GaussianLogitMap, LabelKind, TargetMask};
use crate::scalar::Scalar;

/// Logistic function, stable for large `|x|`.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let e = (-x.abs()).exp();
    if x >= T::zero() {
        T::one() / (T::one() + e)
    } else {
        e / (T::one() + e)
    }
}

/// Binary cross-entropy `-(y log p + (1 - y) log(1 - p))`, with `p`
/// clamped away from 0 and 1.
#[inline]
pub fn bce<T: Scalar>(p_hat: T, y: u8) -> T {
    debug_assert!(y <= 1);
    let eps = T::of(T::PROB_EPS);
    let p = p_hat.max(eps).min(T::one() - eps);
    if y == 1 {
        -p.ln()
    } else {
        -(T::one() - p).ln()
    }
}

/// Plain BCE on the mean logit. Never trains the variance.
#[inline]
pub fn bce_on_logit<T: Scalar>(mu: T, y: u8) -> LossValueGrad<T> {
    let p = sigmoid(mu);
    LossValueGrad {
        value: bce(p, y),
        d_mu: p - T::of(y as f64),
        d_log_var: T::zero(),
    }
}

/// Plain squared error `(target - mu)^2` on the mean logit.
#[inline]
pub fn l2_on_logit<T: Scalar>(mu: T, target: T) -> LossValueGrad<T> {
    let r = mu - target;
    LossValueGrad {
        value: r * r,
        d_mu: r + r,
        d_log_var: T::zero(),
    }
}

/// Gaussian negative log-likelihood without the constant:
/// `(y - mu)^2 / (2 sigma^2) + s / 2`.
pub fn l2_uncertainty<T: Scalar>(g: GaussianLogit<T>, y: T) -> LossValueGrad<T> {
    let half = T::of(0.5);
    let (s, live) = g.clamped_log_var();
    let inv_var = (-s).exp();
    let r = y - g.mu;
    let attenuated = r * r * inv_var * half;
    LossValueGrad {
        value: attenuated + half * s,
        d_mu: -r * inv_var,
        d_log_var: if live { half - attenuated } else { T::zero() },
    }
}

/// `1 / sqrt(1 + pi sigma^2 / 8)`, the probit-style logit shrink factor.
#[inline]
fn shrink<T: Scalar>(variance: T) -> T {
    T::one() / (T::one() + T::PI() * variance / T::of(8.0)).sqrt()
}

/// Closed-form approximation of `E[sigmoid(l)]` for `l ~ N(mu, sigma^2)`.
pub fn expected_sigmoid<T: Scalar>(g: GaussianLogit<T>) -> T {
    sigmoid(g.mu * shrink(g.variance()))
}

/// BCE of the expected probability, with exact derivatives through the
/// approximation.
pub fn bce_uncertainty<T: Scalar>(g: GaussianLogit<T>, y: u8) -> LossValueGrad<T> {
    let (s, live) = g.clamped_log_var();
    let var = s.exp();
    let k = shrink(var);
    let p = sigmoid(k * g.mu);
    let residual = p - T::of(y as f64);
    let d_log_var = if live {
        residual * g.mu * (-T::PI() * var / T::of(16.0)) * k * k * k
    } else {
        T::zero()
    };
    LossValueGrad {
        value: bce(p, y),
        d_mu: residual * k,
        d_log_var,
    }
}

/// `W = sigmoid((tau - sigma^2) / slope)`: weight on the original target.
pub fn bootstrap_weight<T: Scalar>(log_var: T, params: &BootstrapParams<T>) -> T {
    let var = super::clamp_log_var(log_var).0.exp();
    sigmoid((params.tau() - var) / params.slope())
}

/// `W * BCE(mu, y) + (1 - W) * BCE(mu, 1 - y)` with `W` held constant, so the
/// log-variance receives no gradient from this term.
pub fn bootstrap_loss<T: Scalar>(
    g: GaussianLogit<T>,
    y: u8,
    params: &BootstrapParams<T>,
) -> LossValueGrad<T> {
    let w = bootstrap_weight(g.log_var, params);
    bootstrap_loss_weighted(g.mu, y, w)
}

#[inline]
fn bootstrap_loss_weighted<T: Scalar>(mu: T, y: u8, w: T) -> LossValueGrad<T> {
    let p = sigmoid(mu);
    let flipped = 1 - y;
    let yf = T::of(y as f64);
    let ff = T::of(flipped as f64);
    LossValueGrad {
        value: w * bce(p, y) + (T::one() - w) * bce(p, flipped),
        d_mu: w * (p - yf) + (T::one() - w) * (p - ff),
        d_log_var: T::zero(),
    }
}

fn binary_setup<T: Scalar>(
    logits: &GaussianLogitMap<T>,
    targets: &TargetMask,
) -> Result<LossBreakdown<T>> {
    check_shapes(logits, targets)?;
    if logits.classes() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "binary loss expects 1 logit channel, got {}",
            logits.classes()
        )));
    }
    if targets.max_label() > 1 {
        return Err(Error::InvalidParameter(format!(
            "binary loss expects labels in {{0, 1}}, found {}",
            targets.max_label()
        )));
    }
    let mut out = LossBreakdown::new(1, logits.height(), logits.width());
    out.effective_target.copy_from_slice(targets.labels());
    Ok(out)
}

/// Plain BCE on every pixel regardless of label kind.
pub fn plain_bce_loss<T: Scalar>(
    logits: &GaussianLogitMap<T>,
    targets: &TargetMask,
) -> Result<LossBreakdown<T>> {
    let mut out = binary_setup(logits, targets)?;
    let n = logits.pixels();
    let scale = T::one() / T::of(n as f64);
    let mut total = T::zero();
    for (p, &y) in targets.labels().iter().enumerate() {
        let term = bce_on_logit(logits.mu().data()[p], y);
        total += term.value;
        out.d_mu.data_mut()[p] = term.d_mu * scale;
    }
    out.loss = total * scale;
    Ok(out)
}

fn uses_uncertainty(kind: LabelKind, in_box: bool, region: RegionMode) -> bool {
    kind == LabelKind::BoxDerived && (region == RegionMode::UncAll || in_box)
}

/// Gated uncertainty + bootstrapping loss over one binary map.
///
/// Pixel-perfect pixels get plain BCE on the mean. Box-derived pixels in the
/// active region get `bce_uncertainty` (trains only the log-variance) plus
/// `bootstrap_loss` (trains only the mean). Other pixels get plain BCE.
pub fn composite_binary_loss<T: Scalar>(
    logits: &GaussianLogitMap<T>,
    targets: &TargetMask,
    params: &BootstrapParams<T>,
    region: RegionMode,
) -> Result<LossBreakdown<T>> {
    let mut out = binary_setup(logits, targets)?;
    let n = logits.pixels();
    let scale = T::one() / T::of(n as f64);
    let half = T::of(0.5);
    let mut total = T::zero();
    for p in 0..n {
        let g = logits.logit(0, p);
        let y = targets.labels()[p];
        if uses_uncertainty(targets.kinds()[p], targets.in_box()[p], region) {
            let unc = bce_uncertainty(g, y);
            let w = bootstrap_weight(g.log_var, params);
            let boot = bootstrap_loss_weighted(g.mu, y, w);
            total += unc.value + boot.value;
            out.d_mu.data_mut()[p] = boot.d_mu * scale;
            out.d_log_var.data_mut()[p] = unc.d_log_var * scale;
            out.weight[p] = w;
            if w < half {
                out.flipped[p] = true;
                out.effective_target[p] = 1 - y;
            }
        } else {
            let term = bce_on_logit(g.mu, y);
            total += term.value;
            out.d_mu.data_mut()[p] = term.d_mu * scale;
        }
    }
    out.loss = total * scale;
    Ok(out)
}

/// Regression variant: plain L2 for pixel-perfect pixels, attenuated L2 with
/// uncertainty on box-derived pixels in the active region. Targets are mapped
/// to `-1` (background) and `+1` (foreground) so that `mu > 0` marks foreground.
/// Both mean and log-variance are trained by the uncertainty term.
pub fn composite_l2_loss<T: Scalar>(
    logits: &GaussianLogitMap<T>,
    targets: &TargetMask,
    region: RegionMode,
) -> Result<LossBreakdown<T>> {
    let mut out = binary_setup(logits, targets)?;
    let n = logits.pixels();
    let scale = T::one() / T::of(n as f64);
    let mut total = T::zero();
    for p in 0..n {
        let g = logits.logit(0, p);
        let y = targets.labels()[p];
        let t = if y == 1 { T::one() } else { -T::one() };
        let term = if uses_uncertainty(targets.kinds()[p], targets.in_box()[p], region) {
            l2_uncertainty(g, t)
        } else {
            l2_on_logit(g.mu, t)
        };
        total += term.value;
        out.d_mu.data_mut()[p] = term.d_mu * scale;
        out.d_log_var.data_mut()[p] = term.d_log_var * scale;
    }
    out.loss = total * scale;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorBuf;
    use approx::assert_abs_diff_eq;

    fn g(mu: f64, s: f64) -> GaussianLogit<f64> {
        GaussianLogit::new(mu, s)
    }

    #[test]
    fn sigmoid_reference_points() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_abs_diff_eq!(sigmoid(3.0f64.ln()), 0.75, epsilon = 1e-15);
        let tiny = sigmoid(-40.0f64);
        assert!(tiny > 0.0 && tiny < 1e-17);
        assert!(sigmoid(700.0f64) == 1.0 && sigmoid(-700.0f64) > 0.0);
    }

    #[test]
    fn bce_reference_points() {
        assert_abs_diff_eq!(bce(0.5f64, 1), std::f64::consts::LN_2, epsilon = 1e-15);
        assert!(bce(1.0 - 1e-12f64, 1) < 1e-11);
        assert_abs_diff_eq!(bce(0.9f64, 0), std::f64::consts::LN_10, epsilon = 1e-12);
        assert!(bce(0.0f64, 1).is_finite());
    }

    #[test]
    fn l2_uncertainty_reference_points() {
        let a = l2_uncertainty(g(0.0, 0.0), 0.0);
        assert_eq!((a.value, a.d_mu, a.d_log_var), (0.0, 0.0, 0.5));
        assert_abs_diff_eq!(l2_uncertainty(g(0.0, 0.0), 1.0).value, 0.5, epsilon = 1e-15);
        // 0.25 / 4 + ln(2) / 2
        let b = l2_uncertainty(g(0.5, 2f64.ln()), 1.0);
        assert_abs_diff_eq!(b.value, 0.409_073_590_279_972_65, epsilon = 1e-12);
    }

    #[test]
    fn expected_sigmoid_reference_points() {
        for s in [-5.0, 0.0, 3.0] {
            assert_eq!(expected_sigmoid(g(0.0, s)), 0.5);
        }
        assert_abs_diff_eq!(expected_sigmoid(g(3.0, -30.0)), sigmoid(3.0), epsilon = 1e-6);
        let s = (8.0 / std::f64::consts::PI).ln();
        assert_abs_diff_eq!(expected_sigmoid(g(2.0, s)), 0.804_429_682_506_956_9, epsilon = 1e-9);
    }

    #[test]
    fn bce_uncertainty_reference_points() {
        let a = bce_uncertainty(g(0.0, 0.0), 1);
        assert_abs_diff_eq!(a.value, std::f64::consts::LN_2, epsilon = 1e-15);
        let b = bce_uncertainty(g(5.0, -30.0), 1);
        assert_abs_diff_eq!(b.value, 0.006_715_348_489_118_069, epsilon = 1e-9);
    }

    #[test]
    fn bce_uncertainty_gradient_matches_finite_differences() {
        let (mu, s, h) = (1.0, 1.0, 1e-6);
        let at = |mu: f64, s: f64| bce_uncertainty(g(mu, s), 0).value;
        let a = bce_uncertainty(g(mu, s), 0);
        let num_mu = (at(mu + h, s) - at(mu - h, s)) / (2.0 * h);
        let num_s = (at(mu, s + h) - at(mu, s - h)) / (2.0 * h);
        assert!((a.d_mu - num_mu).abs() / num_mu.abs() <= 1e-6);
        assert!((a.d_log_var - num_s).abs() / num_s.abs() <= 1e-6);
    }

    #[test]
    fn bootstrap_weight_reference_points() {
        let p = BootstrapParams::<f64>::default();
        assert_abs_diff_eq!(bootstrap_weight(2.5f64.ln(), &p), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(
            bootstrap_weight(2.3f64.ln(), &p),
            0.731_058_578_630_004_9,
            epsilon = 1e-9
        );
        assert!(bootstrap_weight(12.5f64.ln(), &p) < 1e-20);
    }

    #[test]
    fn bootstrap_loss_reference_points() {
        let p = BootstrapParams::<f64>::default();
        let mu = 0.7;
        let at_tau = bootstrap_loss(g(mu, 2.5f64.ln()), 1, &p);
        let sym = 0.5 * (bce(sigmoid(mu), 1) + bce(sigmoid(mu), 0));
        assert_abs_diff_eq!(at_tau.value, sym, epsilon = 1e-12);

        let confident = bootstrap_loss(g(0.0, -10.0), 1, &p);
        assert_abs_diff_eq!(confident.value, std::f64::consts::LN_2, epsilon = 1e-5);
        assert_abs_diff_eq!(confident.d_mu, -0.5, epsilon = 1e-5);
    }

    #[test]
    fn clamped_log_var_has_zero_derivative() {
        let a = bce_uncertainty(g(1.0, 40.0), 0);
        assert_eq!(a.d_log_var, 0.0);
        assert!(a.value.is_finite() && a.d_mu.is_finite());
        let b = l2_uncertainty(g(1.0, -45.0), 0.0);
        assert_eq!(b.d_log_var, 0.0);
        assert!(b.value.is_finite());
    }

    fn single_pixel(mu: f64, s: f64, y: u8, kind: LabelKind, in_box: bool) -> (GaussianLogitMap<f64>, TargetMask) {
        let logits = GaussianLogitMap::new(
            TensorBuf::from_vec([1, 1, 1], vec![mu]).unwrap(),
            TensorBuf::from_vec([1, 1, 1], vec![s]).unwrap(),
        )
        .unwrap();
        let t = TargetMask::uniform(1, 1, kind, vec![y], vec![in_box]).unwrap();
        (logits, t)
    }

    #[test]
    fn composite_single_box_pixel_is_sum_of_terms() {
        let p = BootstrapParams::<f64>::default();
        let (l, t) = single_pixel(0.0, 0.0, 1, LabelKind::BoxDerived, true);
        let out = composite_binary_loss(&l, &t, &p, RegionMode::UncBoxOnly).unwrap();
        let expected = bce_uncertainty(g(0.0, 0.0), 1).value + bootstrap_loss(g(0.0, 0.0), 1, &p).value;
        assert_eq!(out.loss, expected);
        assert!(!out.flipped[0]);
    }

    #[test]
    fn composite_rejects_bad_inputs() {
        let p = BootstrapParams::<f64>::default();
        let logits = GaussianLogitMap::<f64>::zeros(1, 2, 2);
        let t = TargetMask::uniform(2, 3, LabelKind::PixelPerfect, vec![0; 6], vec![false; 6]).unwrap();
        assert!(matches!(
            composite_binary_loss(&logits, &t, &p, RegionMode::UncAll),
            Err(Error::ShapeMismatch(_))
        ));
        let empty = GaussianLogitMap::<f64>::zeros(1, 0, 0);
        let t0 = TargetMask::uniform(0, 0, LabelKind::PixelPerfect, vec![], vec![]).unwrap();
        assert!(matches!(
            composite_binary_loss(&empty, &t0, &p, RegionMode::UncAll),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn outside_box_pixels_depend_on_region_mode() {
        let p = BootstrapParams::<f64>::default();
        let (l, t) = single_pixel(0.3, 2.0, 0, LabelKind::BoxDerived, false);
        let boxed = composite_binary_loss(&l, &t, &p, RegionMode::UncBoxOnly).unwrap();
        assert_eq!(boxed.loss, bce_on_logit(0.3, 0).value);
        assert_eq!(boxed.d_log_var.data()[0], 0.0);
        let all = composite_binary_loss(&l, &t, &p, RegionMode::UncAll).unwrap();
        assert_ne!(all.d_log_var.data()[0], 0.0);
        // sigma^2 = e^2 > 2.5
        assert!(all.flipped[0]);
        assert_eq!(all.effective_target[0], 1);
    }

    #[test]
    fn background_pixel_perfect_loss_vanishes_for_confident_mean() {
        let n = 9;
        let logits = GaussianLogitMap::new(
            TensorBuf::from_vec([1, 3, 3], vec![-60.0; n]).unwrap(),
            TensorBuf::from_vec([1, 3, 3], vec![1.0; n]).unwrap(),
        )
        .unwrap();
        let t = TargetMask::uniform(3, 3, LabelKind::PixelPerfect, vec![0; n], vec![false; n]).unwrap();
        let out = composite_binary_loss(&logits, &t, &BootstrapParams::default(), RegionMode::UncAll).unwrap();
        assert!(out.loss < 1e-11);
    }

    #[test]
    fn l2_composite_trains_both_heads_in_boxes() {
        let (l, t) = single_pixel(0.2, 0.5, 1, LabelKind::BoxDerived, true);
        let out = composite_l2_loss(&l, &t, RegionMode::UncBoxOnly).unwrap();
        let direct = l2_uncertainty(g(0.2, 0.5), 1.0);
        assert_eq!(out.loss, direct.value);
        assert_eq!(out.d_log_var.data()[0], direct.d_log_var);
        let (l, t) = single_pixel(0.2, 0.5, 0, LabelKind::PixelPerfect, false);
        let out = composite_l2_loss(&l, &t, RegionMode::UncAll).unwrap();
        assert_abs_diff_eq!(out.loss, 1.44, epsilon = 1e-12);
        assert_eq!(out.d_log_var.data()[0], 0.0);
    }
}
