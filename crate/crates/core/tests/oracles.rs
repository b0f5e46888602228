use approx::assert_abs_diff_eq;
use boxboot::loss::binary::{
    bce_on_logit, bce_uncertainty, bootstrap_loss, composite_binary_loss, composite_l2_loss, expected_sigmoid,
    l2_on_logit, l2_uncertainty, sigmoid,
};
use boxboot::loss::multiclass::{
    composite_multiclass_loss, cross_entropy, draw_noise, flip_target, mc_expected_ce, mc_expected_ce_with_noise,
    pixel_rng, McConfig, StreamKey,
};
use boxboot::loss::{BootstrapParams, GaussianLogit, GaussianLogitVec, LossBreakdown, RegionMode};
use boxboot::maps::{GaussianLogitMap, LabelKind, TargetMask};
use boxboot::rng::derive_rng;
use boxboot::tensor::TensorBuf;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

// Reference values below come from 40-digit arithmetic with numerical
// differentiation, independent of this crate.

#[test]
fn bce_uncertainty_reference_values() {
    let cases = [
        // mu, s, y, p, value, d_mu, d_s
        (1.0, 0.0, 1, 0.7000144407062076, 0.35665431457122267, -0.25419775140768454, 0.035838044578129678),
        (-0.7, 1.2, 0, 0.38670478881936248, 0.48890887466270316, 0.25477482741096445, 0.050465171792130776),
        (2.3, -1.0, 1, 0.8956631995759663, 0.11019083000320829, -0.09752951902310257, 0.014157822472941677),
        (0.4, 2.0, 0, 0.55045379455420867, 0.79951663737044816, 0.2786732574258058, -0.041449852340011051),
    ];
    for (mu, s, y, p, value, d_mu, d_s) in cases {
        let g = GaussianLogit::new(mu, s);
        assert_abs_diff_eq!(expected_sigmoid(g), p, epsilon = 1e-14);
        let r = bce_uncertainty(g, y);
        assert_abs_diff_eq!(r.value, value, epsilon = 1e-14);
        assert_abs_diff_eq!(r.d_mu, d_mu, epsilon = 1e-14);
        assert_abs_diff_eq!(r.d_log_var, d_s, epsilon = 1e-14);
    }
}

#[test]
fn multiclass_reference_values() {
    let g = GaussianLogitVec::new(vec![0.5, -0.3, 1.2], vec![0.5f64.ln(), 0.0, 2.0f64.ln()]).unwrap();
    let noise = [0.3, -1.1, 0.7, -0.4, 0.9, -1.5];
    let r = mc_expected_ce_with_noise(&g, 2, &noise);
    assert_abs_diff_eq!(r.value, 0.78604637730685629, epsilon = 1e-13);
    let d_mu = [0.20402018919017098, 0.08557808614780309, -0.28959827533797407];
    let d_s = [0.010438347033728312, 0.019303361308949789, 0.030313624050586474];
    for k in 0..3 {
        assert_abs_diff_eq!(r.d_mu[k], d_mu[k], epsilon = 1e-13);
        assert_abs_diff_eq!(r.d_log_var[k], d_s[k], epsilon = 1e-13);
    }

    let ce = cross_entropy(&[0.5, -0.3, 1.2], 0);
    assert_abs_diff_eq!(ce.value, 1.2421588491986966, epsilon = 1e-14);
    let q = [0.28876015492338535, 0.12974830129005316, 0.58149154378656149];
    assert_abs_diff_eq!(ce.d_mu[0], q[0] - 1.0, epsilon = 1e-14);
    assert_abs_diff_eq!(ce.d_mu[1], q[1], epsilon = 1e-14);
    assert_abs_diff_eq!(ce.d_mu[2], q[2], epsilon = 1e-14);
}

#[test]
fn expected_sigmoid_matches_monte_carlo() {
    const SAMPLES: usize = 1_000_000;
    let mut rng = derive_rng(2024, &[]);
    let noise: Vec<f64> = (0..SAMPLES).map(|_| StandardNormal.sample(&mut rng)).collect();
    for mu in [-4.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 4.0] {
        for var in [0.01, 0.1, 0.5, 1.0, 2.5, 5.0, 10.0, 20.0f64] {
            let sd = var.sqrt();
            let mc = noise.iter().map(|&e| sigmoid(mu + sd * e)).sum::<f64>() / SAMPLES as f64;
            let closed = expected_sigmoid(GaussianLogit::new(mu, var.ln()));
            assert!((closed - mc).abs() <= 0.01, "mu={mu} var={var}: {closed} vs {mc}");
        }
    }
}

#[test]
fn monte_carlo_ce_at_vanishing_variance_is_plain_ce() {
    let mut rng = derive_rng(5, &[]);
    let mc = McConfig::default();
    for _ in 0..200 {
        let c = rng.gen_range(2..=4);
        let mu: Vec<f64> = (0..c).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let y = rng.gen_range(0..c);
        let g = GaussianLogitVec::new(mu.clone(), vec![-30.0; c]).unwrap();
        let plain = cross_entropy(&mu, y);
        let sampled = mc_expected_ce(&g, y, &mc, &mut rng);
        assert!((sampled.value - plain.value).abs() <= 1e-6);
        for k in 0..c {
            assert!((sampled.d_mu[k] - plain.d_mu[k]).abs() <= 1e-6);
        }
    }
}

const H: usize = 4;
const W: usize = 4;
const N: usize = H * W;

fn random_map(rng: &mut impl Rng, classes: usize) -> GaussianLogitMap<f64> {
    let mu = (0..classes * N).map(|_| rng.gen_range(-3.0..3.0)).collect();
    // log-variances straddle the flip threshold and the clamp
    let s = (0..classes * N).map(|_| rng.gen_range(-3.0..3.0)).collect();
    GaussianLogitMap::new(
        TensorBuf::from_vec([classes, H, W], mu).unwrap(),
        TensorBuf::from_vec([classes, H, W], s).unwrap(),
    )
    .unwrap()
}

fn random_target(rng: &mut impl Rng, classes: u8) -> TargetMask {
    let in_box: Vec<bool> = (0..N).map(|_| rng.gen_bool(0.6)).collect();
    let kinds: Vec<LabelKind> = (0..N)
        .map(|_| {
            if rng.gen_bool(0.3) {
                LabelKind::PixelPerfect
            } else {
                LabelKind::BoxDerived
            }
        })
        .collect();
    let labels = (0..N)
        .map(|p| {
            if kinds[p] == LabelKind::BoxDerived && !in_box[p] {
                0
            } else {
                rng.gen_range(0..=classes)
            }
        })
        .collect();
    TargetMask::new(H, W, labels, kinds, in_box).unwrap()
}

fn active(t: &TargetMask, p: usize, region: RegionMode) -> bool {
    t.kinds()[p] == LabelKind::BoxDerived && (region == RegionMode::UncAll || t.in_box()[p])
}

/// Loss and per-pixel gradients rebuilt one pixel at a time.
struct Brute {
    loss: f64,
    d_mu: Vec<f64>,
    d_s: Vec<f64>,
}

fn assert_same(out: &LossBreakdown<f64>, brute: &Brute) {
    assert_eq!(out.loss, brute.loss);
    assert_eq!(out.d_mu.data(), &brute.d_mu[..]);
    assert_eq!(out.d_log_var.data(), &brute.d_s[..]);
}

#[test]
fn binary_composites_equal_per_pixel_dispatch() {
    let params = BootstrapParams::default();
    let scale = 1.0 / N as f64;
    for trial in 0..50 {
        let mut rng = derive_rng(trial, &[1]);
        let map = random_map(&mut rng, 1);
        let target = random_target(&mut rng, 1);
        for region in [RegionMode::UncAll, RegionMode::UncBoxOnly] {
            let mut bce = Brute { loss: 0.0, d_mu: vec![0.0; N], d_s: vec![0.0; N] };
            let mut l2 = Brute { loss: 0.0, d_mu: vec![0.0; N], d_s: vec![0.0; N] };
            for p in 0..N {
                let g = map.logit(0, p);
                let y = target.labels()[p];
                let t = if y == 1 { 1.0 } else { -1.0 };
                if active(&target, p, region) {
                    let unc = bce_uncertainty(g, y);
                    let boot = bootstrap_loss(g, y, &params);
                    bce.loss += unc.value + boot.value;
                    bce.d_mu[p] = boot.d_mu * scale;
                    bce.d_s[p] = unc.d_log_var * scale;
                    let r = l2_uncertainty(g, t);
                    l2.loss += r.value;
                    l2.d_mu[p] = r.d_mu * scale;
                    l2.d_s[p] = r.d_log_var * scale;
                } else {
                    let r = bce_on_logit(g.mu, y);
                    bce.loss += r.value;
                    bce.d_mu[p] = r.d_mu * scale;
                    let r = l2_on_logit(g.mu, t);
                    l2.loss += r.value;
                    l2.d_mu[p] = r.d_mu * scale;
                }
            }
            bce.loss *= scale;
            l2.loss *= scale;
            assert_same(&composite_binary_loss(&map, &target, &params, region).unwrap(), &bce);
            assert_same(&composite_l2_loss(&map, &target, region).unwrap(), &l2);
        }
    }
}

#[test]
fn multiclass_composite_equals_per_pixel_dispatch() {
    let mc = McConfig::new(20, 3).unwrap();
    let tau = 2.5;
    let scale = 1.0 / N as f64;
    for trial in 0..50 {
        let mut rng = derive_rng(trial, &[2]);
        let c = 3;
        let map = random_map(&mut rng, c);
        let target = random_target(&mut rng, 2);
        let key = StreamKey { step: trial, stream: 7 };
        let mut brute = Brute { loss: 0.0, d_mu: vec![0.0; c * N], d_s: vec![0.0; c * N] };
        let mut flips = vec![false; N];
        for p in 0..N {
            let g = map.logit_vec(p);
            let y = target.labels()[p] as usize;
            if active(&target, p, RegionMode::UncBoxOnly) {
                let noise: Vec<f64> = draw_noise(mc.t_samples(), c, &mut pixel_rng(mc.seed(), key, p as u64));
                let unc = mc_expected_ce_with_noise(&g, y, &noise);
                let y_star = flip_target(&g, y, tau);
                flips[p] = g.variances().iter().any(|&v| v > tau);
                let boot = cross_entropy(g.mu(), y_star);
                brute.loss += unc.value + boot.value;
                for k in 0..c {
                    brute.d_mu[k * N + p] = boot.d_mu[k] * scale;
                    brute.d_s[k * N + p] = unc.d_log_var[k] * scale;
                }
            } else {
                let r = cross_entropy(g.mu(), y);
                brute.loss += r.value;
                for k in 0..c {
                    brute.d_mu[k * N + p] = r.d_mu[k] * scale;
                }
            }
        }
        brute.loss *= scale;
        let out = composite_multiclass_loss(&map, &target, tau, &mc, key).unwrap();
        assert_same(&out, &brute);
        assert_eq!(out.flipped, flips);
    }
}
