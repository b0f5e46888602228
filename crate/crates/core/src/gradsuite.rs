//! Finite-difference suites over every analytic gradient in the crate.
//!
//! Each suite compares analytic derivatives against central differences and
//! reports the largest relative error. Gated losses are checked against the
//! objective with the detached quantities frozen at the probe point, which is
//! the function whose gradient the gating defines.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::binary::{bce, bce_on_logit, bce_uncertainty, bootstrap_loss, bootstrap_weight, l2_uncertainty, sigmoid};
use crate::loss::multiclass::{
    argmax, cross_entropy, draw_noise, mc_expected_ce_with_noise, pixel_rng, McConfig, StreamKey, DEFAULT_T_SAMPLES,
};
use crate::loss::{BootstrapParams, GaussianLogit, GaussianLogitVec, RegionMode, DEFAULT_SLOPE, DEFAULT_TAU};
use crate::maps::{GaussianLogitMap, LabelKind, TargetMask};
use crate::net::gradcheck::central_difference_error;
use crate::net::{finite_diff_check, Network};
use crate::rng::derive_rng;
use crate::tensor::TensorBuf;
use crate::train::LossVariant;

/// Step for the closed-form binary losses and the network.
pub const H_CLOSED_FORM: f64 = 1e-6;
/// Step for the Monte-Carlo loss.
pub const H_MONTE_CARLO: f64 = 1e-5;
pub const TOL_CLOSED_FORM: f64 = 1e-4;
pub const TOL_MONTE_CARLO: f64 = 1e-3;

const LOSS_POINTS: usize = 1000;
const MC_POINTS: usize = 200;
const NET_PROBES: usize = 40;
const NET_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    BcePlain,
    L2Unc,
    BceUncBootstrap,
    MultiClass,
    Network,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::BcePlain,
        Suite::L2Unc,
        Suite::BceUncBootstrap,
        Suite::MultiClass,
        Suite::Network,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::BcePlain => "BcePlain",
            Suite::L2Unc => "L2Unc",
            Suite::BceUncBootstrap => "BceUncBootstrap",
            Suite::MultiClass => "MultiClass",
            Suite::Network => "Network",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Suite::MultiClass => TOL_MONTE_CARLO,
            _ => TOL_CLOSED_FORM,
        }
    }

    pub fn for_loss(variant: LossVariant) -> Self {
        match variant {
            LossVariant::BcePlain => Suite::BcePlain,
            LossVariant::L2Unc => Suite::L2Unc,
            LossVariant::BceUncBootstrap => Suite::BceUncBootstrap,
            LossVariant::MultiClass => Suite::MultiClass,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Negates every analytic gradient before comparison. Used to confirm
    /// that the harness catches a broken gradient.
    pub inject_sign_flip: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

pub fn run_suite(suite: Suite, opts: SuiteOptions) -> Result<SuiteReport> {
    let mut rng = derive_rng(opts.seed, &[suite as u64]);
    let sign = if opts.inject_sign_flip { -1.0 } else { 1.0 };
    let (checks, max_rel_err) = match suite {
        Suite::BcePlain => bce_plain_suite(&mut rng, sign),
        Suite::L2Unc => l2_suite(&mut rng, sign),
        Suite::BceUncBootstrap => bootstrap_suite(&mut rng, sign),
        Suite::MultiClass => multiclass_suite(&mut rng, sign),
        Suite::Network => network_suite(&mut rng, sign)?,
    };
    Ok(SuiteReport {
        suite,
        checks,
        max_rel_err,
        tolerance: suite.tolerance(),
    })
}

/// Error of `analytic` against the central difference of `f` at `x`.
fn fd_error<F: Fn(f64) -> f64>(analytic: f64, f: F, x: f64, h: f64) -> f64 {
    central_difference_error(analytic, f(x + h), f(x - h), h, x)
}

fn random_point(rng: &mut ChaCha8Rng) -> (f64, f64, u8) {
    (rng.gen_range(-6.0..6.0), rng.gen_range(-4.0..2.0), rng.gen_range(0..=1))
}

fn bce_plain_suite(rng: &mut ChaCha8Rng, sign: f64) -> (usize, f64) {
    let mut worst = 0.0f64;
    for _ in 0..LOSS_POINTS {
        let (mu, _, y) = random_point(rng);
        let a = bce_on_logit(mu, y).d_mu * sign;
        worst = worst.max(fd_error(a, |m| bce(sigmoid(m), y), mu, H_CLOSED_FORM));
    }
    (LOSS_POINTS, worst)
}

fn l2_suite(rng: &mut ChaCha8Rng, sign: f64) -> (usize, f64) {
    let mut worst = 0.0f64;
    for _ in 0..LOSS_POINTS {
        let (mu, s, y) = random_point(rng);
        let t = f64::from(y);
        let a = l2_uncertainty(GaussianLogit::new(mu, s), t);
        let f_mu = |m| l2_uncertainty(GaussianLogit::new(m, s), t).value;
        let f_s = |v| l2_uncertainty(GaussianLogit::new(mu, v), t).value;
        worst = worst
            .max(fd_error(a.d_mu * sign, f_mu, mu, H_CLOSED_FORM))
            .max(fd_error(a.d_log_var * sign, f_s, s, H_CLOSED_FORM));
    }
    (LOSS_POINTS, worst)
}

/// Checks `bce_uncertainty` in both arguments, `bootstrap_loss` in the mean
/// with `W` frozen, and that the bootstrap term leaves the variance untouched.
fn bootstrap_suite(rng: &mut ChaCha8Rng, sign: f64) -> (usize, f64) {
    let params = BootstrapParams::new(DEFAULT_TAU, DEFAULT_SLOPE).expect("default parameters are valid");
    let mut worst = 0.0f64;
    for _ in 0..LOSS_POINTS {
        let (mu, s, y) = random_point(rng);
        let g = GaussianLogit::new(mu, s);
        let unc = bce_uncertainty(g, y);
        let f_mu = |m| bce_uncertainty(GaussianLogit::new(m, s), y).value;
        let f_s = |v| bce_uncertainty(GaussianLogit::new(mu, v), y).value;
        worst = worst
            .max(fd_error(unc.d_mu * sign, f_mu, mu, H_CLOSED_FORM))
            .max(fd_error(unc.d_log_var * sign, f_s, s, H_CLOSED_FORM));

        let boot = bootstrap_loss(g, y, &params);
        let w = bootstrap_weight(s, &params);
        let frozen = |m: f64| {
            let p = sigmoid(m);
            w * bce(p, y) + (1.0 - w) * bce(p, 1 - y)
        };
        worst = worst.max(fd_error(boot.d_mu * sign, frozen, mu, H_CLOSED_FORM));
        if boot.d_log_var != 0.0 {
            worst = f64::INFINITY;
        }
    }
    (LOSS_POINTS, worst)
}

fn multiclass_suite(rng: &mut ChaCha8Rng, sign: f64) -> (usize, f64) {
    let mut worst = 0.0f64;
    for i in 0..MC_POINTS {
        let c = 2 + i % 2;
        let mu: Vec<f64> = (0..c).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let s: Vec<f64> = (0..c).map(|_| rng.gen_range(-4.0..2.0)).collect();
        let y = rng.gen_range(0..c);
        let noise: Vec<f64> = draw_noise(DEFAULT_T_SAMPLES, c, rng);
        let value = |mu: &[f64], s: &[f64]| {
            let g = GaussianLogitVec::new(mu.to_vec(), s.to_vec()).expect("valid logit vector");
            mc_expected_ce_with_noise(&g, y, &noise).value
        };
        let g = GaussianLogitVec::new(mu.clone(), s.clone()).expect("valid logit vector");
        let a = mc_expected_ce_with_noise(&g, y, &noise);
        // the log-sum-exp works on logits of this size
        let magnitude = mu.iter().chain(&s).fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..c {
            let shifted = |v: &[f64], d: f64| {
                let mut out = v.to_vec();
                out[k] += d;
                out
            };
            let h = H_MONTE_CARLO;
            let (mu_plus, mu_minus) = (value(&shifted(&mu, h), &s), value(&shifted(&mu, -h), &s));
            let (s_plus, s_minus) = (value(&mu, &shifted(&s, h)), value(&mu, &shifted(&s, -h)));
            worst = worst
                .max(central_difference_error(a.d_mu[k] * sign, mu_plus, mu_minus, h, magnitude))
                .max(central_difference_error(a.d_log_var[k] * sign, s_plus, s_minus, h, magnitude));
        }
    }
    (MC_POINTS, worst)
}

fn random_image(rng: &mut ChaCha8Rng) -> TensorBuf<f64> {
    let data = (0..3 * NET_SIZE * NET_SIZE).map(|_| rng.gen_range(0.0..1.0)).collect();
    TensorBuf::from_vec([3, NET_SIZE, NET_SIZE], data).expect("shape matches data")
}

/// Mixed-kind targets with one box in the middle of the map.
fn random_targets(rng: &mut ChaCha8Rng, classes: u8) -> TargetMask {
    let n = NET_SIZE * NET_SIZE;
    let in_box: Vec<bool> = (0..n)
        .map(|p| (2..6).contains(&(p % NET_SIZE)) && (2..6).contains(&(p / NET_SIZE)))
        .collect();
    let box_class = rng.gen_range(1..=classes);
    let mut labels = vec![0u8; n];
    let mut kinds = vec![LabelKind::BoxDerived; n];
    for p in 0..n {
        if p % 3 == 0 {
            kinds[p] = LabelKind::PixelPerfect;
            labels[p] = rng.gen_range(0..=classes);
        } else if in_box[p] {
            labels[p] = box_class;
        }
    }
    TargetMask::new(NET_SIZE, NET_SIZE, labels, kinds, in_box).expect("consistent target")
}

/// The per-map objective whose gradient the gated composite reports, with the
/// detached means and variances taken from `base`.
fn gated_objective(
    variant: LossVariant,
    base: &GaussianLogitMap<f64>,
    now: &GaussianLogitMap<f64>,
    targets: &TargetMask,
    mc: &McConfig,
) -> f64 {
    let n = now.pixels();
    let mut total = 0.0;
    for p in 0..n {
        let y = targets.labels()[p];
        let active = targets.kinds()[p] == LabelKind::BoxDerived && targets.in_box()[p];
        total += match variant {
            LossVariant::BceUncBootstrap if active => {
                let params = BootstrapParams::new(DEFAULT_TAU, DEFAULT_SLOPE).expect("default parameters are valid");
                let (b, c) = (base.logit(0, p), now.logit(0, p));
                let w = bootstrap_weight(b.log_var, &params);
                let q = sigmoid(c.mu);
                bce_uncertainty(GaussianLogit::new(b.mu, c.log_var), y).value
                    + w * bce(q, y)
                    + (1.0 - w) * bce(q, 1 - y)
            }
            LossVariant::L2Unc => {
                let t = if y == 1 { 1.0 } else { -1.0 };
                let g = now.logit(0, p);
                if active {
                    l2_uncertainty(g, t).value
                } else {
                    (g.mu - t) * (g.mu - t)
                }
            }
            LossVariant::MultiClass if active => {
                let (b, c) = (base.logit_vec(p), now.logit_vec(p));
                let mut prng = pixel_rng(mc.seed(), StreamKey::default(), p as u64);
                let noise: Vec<f64> = draw_noise(mc.t_samples(), now.classes(), &mut prng);
                let mixed = GaussianLogitVec::new(b.mu().to_vec(), c.log_var().to_vec()).expect("valid logit vector");
                let max_var = b.variances().into_iter().fold(f64::NEG_INFINITY, f64::max);
                let y_star = if max_var > DEFAULT_TAU { argmax(b.mu()) } else { y as usize };
                mc_expected_ce_with_noise(&mixed, y as usize, &noise).value + cross_entropy(c.mu(), y_star).value
            }
            LossVariant::MultiClass | LossVariant::BcePlain if now.classes() > 1 => {
                cross_entropy(now.logit_vec(p).mu(), y as usize).value
            }
            _ => bce_on_logit(now.logit(0, p).mu, y).value,
        };
    }
    total / n as f64
}

fn map_loss(
    variant: LossVariant,
    logits: &GaussianLogitMap<f64>,
    targets: &TargetMask,
    mc: &McConfig,
) -> Result<(GaussianLogitMap<f64>, f64)> {
    use crate::loss::binary::{composite_binary_loss, composite_l2_loss, plain_bce_loss};
    use crate::loss::multiclass::{composite_multiclass_loss, plain_ce_loss};
    let out = match variant {
        LossVariant::BcePlain if logits.classes() == 1 => plain_bce_loss(logits, targets)?,
        LossVariant::BcePlain => plain_ce_loss(logits, targets)?,
        LossVariant::L2Unc => composite_l2_loss(logits, targets, RegionMode::UncBoxOnly)?,
        LossVariant::BceUncBootstrap => {
            let params = BootstrapParams::new(DEFAULT_TAU, DEFAULT_SLOPE)?;
            composite_binary_loss(logits, targets, &params, RegionMode::UncBoxOnly)?
        }
        LossVariant::MultiClass => {
            composite_multiclass_loss(logits, targets, DEFAULT_TAU, mc, StreamKey::default())?
        }
    };
    Ok((GaussianLogitMap::new(out.d_mu, out.d_log_var)?, out.loss))
}

/// End-to-end checks through the network: a random linear functional of the
/// outputs, then every loss variant on mixed-kind targets, for C in 1..=3.
fn network_suite(rng: &mut ChaCha8Rng, sign: f64) -> Result<(usize, f64)> {
    let mc = McConfig::new(DEFAULT_T_SAMPLES, 7)?;
    let mut worst = 0.0f64;
    let mut checks = 0;
    let configs: [(usize, Option<LossVariant>); 9] = [
        (1, None),
        (2, None),
        (3, None),
        (1, Some(LossVariant::BcePlain)),
        (1, Some(LossVariant::L2Unc)),
        (1, Some(LossVariant::BceUncBootstrap)),
        (3, Some(LossVariant::BcePlain)),
        (2, Some(LossVariant::MultiClass)),
        (3, Some(LossVariant::MultiClass)),
    ];
    for (classes, variant) in configs {
        let mut net = Network::<f64>::new(3, classes, rng.gen())?;
        let image = random_image(rng);
        let (base, cache) = net.forward(&image)?;
        let (d_out, objective): (GaussianLogitMap<f64>, Box<dyn Fn(&GaussianLogitMap<f64>) -> f64>) = match variant {
            None => {
                let len = base.mu().len();
                let mut dir = || -> Result<TensorBuf<f64>> {
                    let data = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    TensorBuf::from_vec(base.mu().shape(), data)
                };
                let d = GaussianLogitMap::new(dir()?, dir()?)?;
                let dc = d.clone();
                let f = move |m: &GaussianLogitMap<f64>| {
                    let dot = |a: &TensorBuf<f64>, b: &TensorBuf<f64>| -> f64 {
                        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
                    };
                    dot(dc.mu(), m.mu()) + dot(dc.log_var(), m.log_var())
                };
                (d, Box::new(f))
            }
            Some(v) => {
                let object_classes = if classes == 1 { 1 } else { classes as u8 - 1 };
                let targets = random_targets(rng, object_classes);
                let (d, _) = map_loss(v, &base, &targets, &mc)?;
                let base = base.clone();
                let f = move |m: &GaussianLogitMap<f64>| gated_objective(v, &base, m, &targets, &mc);
                (d, Box::new(f))
            }
        };
        let mut grads = net.backward(&cache, d_out.mu(), d_out.log_var())?;
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v *= sign);
        }
        let err = finite_diff_check(
            &mut net,
            &grads,
            |n: &Network<f64>| Ok(objective(&n.forward(&image)?.0)),
            NET_PROBES,
            H_CLOSED_FORM,
            rng,
        )?;
        worst = worst.max(err);
        checks += NET_PROBES;
    }
    if !worst.is_finite() {
        return Err(Error::NonFinite {
            what: "network gradient check".into(),
        });
    }
    Ok((checks, worst))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_suites_pass() {
        for suite in [Suite::BcePlain, Suite::L2Unc, Suite::BceUncBootstrap] {
            let r = run_suite(suite, SuiteOptions::default()).unwrap();
            assert!(r.passed(), "{suite}: {}", r.max_rel_err);
            assert_eq!(r.checks, LOSS_POINTS);
        }
    }

    #[test]
    fn monte_carlo_and_network_suites_pass() {
        for suite in [Suite::MultiClass, Suite::Network] {
            let r = run_suite(suite, SuiteOptions::default()).unwrap();
            assert!(r.passed(), "{suite}: {}", r.max_rel_err);
        }
    }

    #[test]
    fn sign_flip_is_caught() {
        let opts = SuiteOptions {
            inject_sign_flip: true,
            ..Default::default()
        };
        let r = run_suite(Suite::BcePlain, opts).unwrap();
        assert!(!r.passed());
        assert!(r.max_rel_err > 1.0);
    }
}
