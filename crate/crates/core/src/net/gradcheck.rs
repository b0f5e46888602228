//! Central finite-difference checks of analytic parameter gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::net::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::TensorBuf;

/// Floor of the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Components smaller than this multiple of the rounding noise of a central
/// difference cannot be resolved, so the denominator is floored there.
pub const NOISE_MARGIN: f64 = 1e4;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error<T: Scalar>(analytic: T, numeric: T) -> T {
    relative_error_floored(analytic, numeric, T::of(REL_ERR_FLOOR))
}

fn relative_error_floored<T: Scalar>(analytic: T, numeric: T, floor: T) -> T {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Relative error of `analytic` against `(plus - minus) / 2h`, the central
/// difference from `f(x + h)` and `f(x - h)`. The denominator is at least
/// `NOISE_MARGIN` times the rounding noise `eps * m / h` of the quotient,
/// where `m = max(1, |plus|, |minus|, magnitude)` and `magnitude` bounds the
/// inputs of the computation.
pub fn central_difference_error<T: Scalar>(analytic: T, plus: T, minus: T, h: T, magnitude: T) -> T {
    let numeric = (plus - minus) / (h + h);
    let m = T::one().max(plus.abs()).max(minus.abs()).max(magnitude.abs());
    let floor = (T::epsilon() * m / h * T::of(NOISE_MARGIN)).max(T::of(REL_ERR_FLOOR));
    relative_error_floored(analytic, numeric, floor)
}

/// Compares `analytic` against the central difference at
/// `n_probes` randomly chosen parameter coordinates and returns the largest
/// [`central_difference_error`]. Parameters are restored before returning.
pub fn finite_diff_check<T, P, F, R>(
    params: &mut P,
    analytic: &[TensorBuf<T>],
    mut f: F,
    n_probes: usize,
    h: T,
    rng: &mut R,
) -> Result<T>
where
    T: Scalar,
    P: ParamSet<T>,
    F: FnMut(&P) -> Result<T>,
    R: Rng + ?Sized,
{
    if n_probes == 0 {
        return Err(Error::InvalidParameter("n_probes must be >= 1".into()));
    }
    if !(h > T::zero()) {
        return Err(Error::InvalidParameter(format!("step h must be positive, got {h}")));
    }
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    if sizes.len() != analytic.len() || sizes.iter().zip(analytic).any(|(&n, a)| n != a.len()) {
        return Err(Error::ShapeMismatch(
            "analytic gradient does not match parameter layout".into(),
        ));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Empty("parameter set"));
    }

    let mut eval = |params: &P| -> Result<T> {
        let v = f(params)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                what: "finite-difference objective".into(),
            })
        }
    };

    let mut worst = T::zero();
    for _ in 0..n_probes {
        let mut flat = rng.gen_range(0..total);
        let mut tensor = 0;
        while flat >= sizes[tensor] {
            flat -= sizes[tensor];
            tensor += 1;
        }
        let original = params.tensors()[tensor].data()[flat];
        params.tensors_mut()[tensor].data_mut()[flat] = original + h;
        let plus = eval(params);
        params.tensors_mut()[tensor].data_mut()[flat] = original - h;
        let minus = eval(params);
        params.tensors_mut()[tensor].data_mut()[flat] = original;
        let err = central_difference_error(analytic[tensor].data()[flat], plus?, minus?, h, original);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> Vec<TensorBuf<f64>> {
        vec![
            TensorBuf::from_vec([2, 1, 3], vec![0.5, -1.0, 2.0, 0.125, 0.25, 0.375]).unwrap(),
            TensorBuf::from_vec([1, 1, 2], vec![4.0, -4.0]).unwrap(),
        ]
    }

    fn sum(p: &Vec<TensorBuf<f64>>) -> Result<f64> {
        Ok(p.iter().flat_map(|t| t.data()).sum())
    }

    #[test]
    fn linear_function_is_exact() {
        let mut p = params();
        let grad: Vec<_> = p
            .iter()
            .map(|t| TensorBuf::from_vec(t.shape(), vec![1.0; t.len()]).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // power-of-two step keeps the perturbed sums exact
        let h = 2f64.powi(-20);
        let err = finite_diff_check(&mut p, &grad, sum, 20, h, &mut rng).unwrap();
        assert!(err <= 1e-10);
        assert_eq!(p, params());
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut p = params();
        let grad: Vec<_> = p
            .iter()
            .map(|t| TensorBuf::from_vec(t.shape(), vec![-1.0; t.len()]).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = finite_diff_check(&mut p, &grad, sum, 5, 1e-6, &mut rng).unwrap();
        assert!(err > 1.0);
    }

    #[test]
    fn unresolvable_components_are_floored() {
        let mut p = vec![TensorBuf::from_vec([1, 1, 1], vec![0.3]).unwrap()];
        let grad = vec![TensorBuf::from_vec([1, 1, 1], vec![1.3e-7]).unwrap()];
        let f = |p: &Vec<TensorBuf<f64>>| Ok(0.8 + 1.3e-7 * p[0].data()[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = finite_diff_check(&mut p, &grad, f, 1, 1e-6, &mut rng).unwrap();
        assert!(err <= 1e-4, "{err}");
        let wrong = vec![TensorBuf::from_vec([1, 1, 1], vec![-1.3e-7]).unwrap()];
        let err = finite_diff_check(&mut p, &wrong, f, 1, 1e-6, &mut rng).unwrap();
        assert!(err > 1e-2, "{err}");
    }

    #[test]
    fn rejects_bad_preconditions() {
        let mut p = params();
        let grad: Vec<_> = p.iter().map(|t| t.zeros_like()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            finite_diff_check(&mut p, &grad, sum, 5, 0.0, &mut rng),
            Err(Error::InvalidParameter(_))
        ));
        assert!(finite_diff_check(&mut p, &grad, sum, 0, 1e-6, &mut rng).is_err());
        let nan = |_: &Vec<TensorBuf<f64>>| Ok(f64::NAN);
        assert!(matches!(
            finite_diff_check(&mut p, &grad, nan, 1, 1e-6, &mut rng),
            Err(Error::NonFinite { .. })
        ));
    }
}
