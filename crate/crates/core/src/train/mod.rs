//! Training loop, batch composition and validation.

mod metrics;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::binary::{bootstrap_weight, composite_binary_loss, composite_l2_loss, plain_bce_loss};
use crate::loss::multiclass::{composite_multiclass_loss, plain_ce_loss, McConfig, StreamKey};
use crate::loss::{BootstrapParams, LossBreakdown, RegionMode, DEFAULT_SLOPE, DEFAULT_TAU};
use crate::maps::{GaussianLogitMap, LabelKind, TargetMask};
use crate::net::{zeros_like, AdamState, ForwardCache, Gradients, Network};
use crate::rng::{derive_rng, domain};
use crate::scalar::Scalar;
use crate::tensor::TensorBuf;

pub use metrics::{iou, metrics_csv, predict_mask, IouCounts, MetricsRecord, METRICS_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    /// Plain BCE (softmax cross-entropy with several classes) on every pixel.
    BcePlain,
    /// Attenuated L2 with learned variance on box-derived pixels.
    L2Unc,
    /// BCE with uncertainty plus uncertainty-weighted bootstrapping.
    BceUncBootstrap,
    /// Monte-Carlo softmax uncertainty plus flip-rule bootstrapping.
    MultiClass,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::BcePlain,
        LossVariant::L2Unc,
        LossVariant::BceUncBootstrap,
        LossVariant::MultiClass,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::BcePlain => "BcePlain",
            LossVariant::L2Unc => "L2Unc",
            LossVariant::BceUncBootstrap => "BceUncBootstrap",
            LossVariant::MultiClass => "MultiClass",
        }
    }

    /// Logit channels the network needs for `classes` object classes.
    pub fn logit_channels(self, classes: u8) -> Result<usize> {
        match (self, classes) {
            (_, 0) => Err(Error::InvalidParameter("dataset has no object classes".into())),
            (LossVariant::MultiClass, c) => Ok(c as usize + 1),
            (LossVariant::BcePlain, c) if c > 1 => Ok(c as usize + 1),
            (_, 1) => Ok(1),
            (v, c) => Err(Error::InvalidParameter(format!(
                "{} is a binary loss but the dataset has {c} object classes",
                v.name()
            ))),
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown loss variant {s:?}")))
    }
}

impl RegionMode {
    pub fn name(self) -> &'static str {
        match self {
            RegionMode::UncAll => "UncAll",
            RegionMode::UncBoxOnly => "UncBoxOnly",
        }
    }
}

impl FromStr for RegionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "UncAll" => Ok(RegionMode::UncAll),
            "UncBoxOnly" => Ok(RegionMode::UncBoxOnly),
            _ => Err(Error::InvalidParameter(format!("unknown region mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss_variant: LossVariant,
    pub region_mode: RegionMode,
    pub tau: f64,
    pub slope: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub pp_sampling_chance: f64,
    pub t_samples: usize,
    pub steps: u64,
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_variant: LossVariant::BceUncBootstrap,
            region_mode: RegionMode::UncBoxOnly,
            tau: DEFAULT_TAU,
            slope: DEFAULT_SLOPE,
            lr: crate::net::adam::DEFAULT_LR,
            batch_size: 8,
            pp_sampling_chance: 0.25,
            t_samples: crate::loss::multiclass::DEFAULT_T_SAMPLES,
            steps: 5000,
            eval_every: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(0.0..=1.0).contains(&self.pp_sampling_chance) {
            return bad(format!("pp_sampling_chance must lie in [0, 1], got {}", self.pp_sampling_chance));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        BootstrapParams::new(self.tau, self.slope)?;
        McConfig::new(self.t_samples, self.seed)?;
        Ok(())
    }
}

/// One batch slot: the image index and the target it is trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub index: usize,
    pub target: TargetMask,
}

/// Draws the label kind of each slot with probability `pp_sampling_chance`
/// for pixel-perfect, then an image of that kind uniformly from the training
/// partition.
pub fn compose_batch<R: Rng + ?Sized>(data: &Dataset, cfg: &TrainConfig, rng: &mut R) -> Result<Vec<BatchItem>> {
    let pools = [
        data.split.train_indices(LabelKind::PixelPerfect),
        data.split.train_indices(LabelKind::BoxDerived),
    ];
    let slots = draw_slots(&pools, cfg, rng)?;
    Ok(slots
        .into_iter()
        .map(|index| BatchItem {
            index,
            target: data.target(index),
        })
        .collect())
}

fn draw_slots<R: Rng + ?Sized>(pools: &[Vec<usize>; 2], cfg: &TrainConfig, rng: &mut R) -> Result<Vec<usize>> {
    (0..cfg.batch_size)
        .map(|_| {
            let pp = rng.gen::<f64>() < cfg.pp_sampling_chance;
            let (pool, name) = if pp {
                (&pools[0], "pixel-perfect training")
            } else {
                (&pools[1], "box-derived training")
            };
            if pool.is_empty() {
                return Err(Error::EmptyPool(name));
            }
            Ok(pool[rng.gen_range(0..pool.len())])
        })
        .collect()
}

/// Validation summary of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub iou: Vec<f64>,
    pub miou: f64,
    pub sigma2_in_mask: f64,
    pub sigma2_in_band: f64,
    pub flip_frac: f64,
}

/// Per-pixel maps of one validation image for export.
#[derive(Debug, Clone, PartialEq)]
pub struct ValMaps {
    pub index: usize,
    pub prediction: Vec<u8>,
    /// Bootstrap weight from the largest per-pixel variance.
    pub weight: Vec<f64>,
    /// In-box pixels whose target would be flipped.
    pub flipped: Vec<bool>,
}

fn max_variance<T: Scalar>(logits: &GaussianLogitMap<T>, p: usize) -> f64 {
    (0..logits.classes())
        .map(|c| logits.logit(c, p).variance().as_f64())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Scores `net` on the validation partition against the true masks.
/// IoU is accumulated jointly over all validation pixels.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &Dataset, tau: f64) -> Result<Evaluation> {
    Validator::new(net, data)?.run(net, data, tau, |_| {})
}

/// Prediction, weight and flip maps of every validation image.
pub fn validation_maps<T: Scalar>(net: &Network<T>, data: &Dataset, tau: f64, slope: f64) -> Result<Vec<ValMaps>> {
    let params = BootstrapParams::new(T::of(tau), T::of(slope))?;
    let mut out = Vec::new();
    Validator::new(net, data)?.run(net, data, tau, |v| {
        let n = v.logits.pixels();
        let weight: Vec<f64> = (0..n)
            .map(|p| bootstrap_weight(T::of(max_variance(v.logits, p).ln()), &params).as_f64())
            .collect();
        let in_box = v.data.scenes[v.index].pixel_perfect_target();
        out.push(ValMaps {
            index: v.index,
            prediction: v.prediction.to_vec(),
            flipped: (0..n).map(|p| in_box.in_box()[p] && max_variance(v.logits, p) > tau).collect(),
            weight,
        });
    })?;
    Ok(out)
}

struct ValView<'a, T> {
    data: &'a Dataset,
    index: usize,
    logits: &'a GaussianLogitMap<T>,
    prediction: &'a [u8],
}

struct Validator<T> {
    images: Vec<(usize, TensorBuf<T>)>,
    cache: ForwardCache<T>,
}

impl<T: Scalar> Validator<T> {
    fn new(net: &Network<T>, data: &Dataset) -> Result<Self> {
        check_compatible(net, data, None)?;
        let images = data
            .split
            .val_indices()
            .into_iter()
            .map(|i| (i, data.scenes[i].image.cast()))
            .collect();
        Ok(Self {
            images,
            cache: ForwardCache::new(),
        })
    }

    fn run<F: FnMut(ValView<T>)>(&mut self, net: &Network<T>, data: &Dataset, tau: f64, mut visit: F) -> Result<Evaluation> {
        if self.images.is_empty() {
            return Err(Error::Empty("validation partition"));
        }
        let classes = data.classes;
        let mut counts = vec![IouCounts::default(); classes as usize];
        let (mut mask_sum, mut mask_n, mut band_sum, mut band_n) = (0.0, 0u64, 0.0, 0u64);
        let (mut flips, mut boxed) = (0u64, 0u64);
        for (index, image) in &self.images {
            let logits = net.forward_with(image, &mut self.cache)?;
            let pred = predict_mask(&logits);
            let scene = &data.scenes[*index];
            for (c, acc) in counts.iter_mut().enumerate() {
                *acc = acc.add(&pred, &scene.true_mask, c as u8 + 1);
            }
            let target = scene.pixel_perfect_target();
            for p in 0..logits.pixels() {
                let var = max_variance(&logits, p);
                let object = scene.true_mask[p] != 0;
                let in_box = target.in_box()[p];
                if object {
                    mask_sum += var;
                    mask_n += 1;
                } else if in_box {
                    band_sum += var;
                    band_n += 1;
                }
                if in_box {
                    boxed += 1;
                    flips += u64::from(var > tau);
                }
            }
            visit(ValView {
                data,
                index: *index,
                logits: &logits,
                prediction: &pred,
            });
        }
        let mean = |s: f64, n: u64| if n == 0 { 0.0 } else { s / n as f64 };
        let iou: Vec<f64> = counts.iter().map(IouCounts::iou).collect();
        Ok(Evaluation {
            miou: iou.iter().sum::<f64>() / iou.len() as f64,
            iou,
            sigma2_in_mask: mean(mask_sum, mask_n),
            sigma2_in_band: mean(band_sum, band_n),
            flip_frac: mean(flips as f64, boxed),
        })
    }
}

/// Checks that `net` fits the dataset (and the loss variant, if given).
pub fn check_compatible<T: Scalar>(net: &Network<T>, data: &Dataset, variant: Option<LossVariant>) -> Result<()> {
    let expected = match variant {
        Some(v) => v.logit_channels(data.classes)?,
        None if data.classes == 1 => 1,
        None => data.classes as usize + 1,
    };
    let ok = net.classes() == expected || (variant.is_none() && data.classes == 1 && net.classes() == 2);
    if !ok || net.in_channels() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "network has {} input channels and {} logit channels; the dataset has 3 input channels and {} object classes",
            net.in_channels(),
            net.classes(),
            data.classes
        )));
    }
    Ok(())
}

/// Stateful training run: parameters, optimizer, batch generator and
/// metrics so far. Parameters stay accessible after a failed step.
pub struct Trainer<'a, T> {
    data: &'a Dataset,
    cfg: TrainConfig,
    net: Network<T>,
    adam: AdamState<T>,
    rng: ChaCha8Rng,
    pools: [Vec<usize>; 2],
    images: Vec<TensorBuf<T>>,
    targets: Vec<Option<TargetMask>>,
    cache: ForwardCache<T>,
    grads: Gradients<T>,
    validator: Validator<T>,
    step: u64,
    loss_sum: f64,
    loss_steps: u64,
    records: Vec<MetricsRecord>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(data: &'a Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let channels = cfg.loss_variant.logit_channels(data.classes)?;
        let net = Network::new(3, channels, cfg.seed)?;
        let pools = [
            data.split.train_indices(LabelKind::PixelPerfect),
            data.split.train_indices(LabelKind::BoxDerived),
        ];
        let images = data.scenes.iter().map(|s| s.image.cast()).collect();
        let mut targets = vec![None; data.len()];
        for &i in pools.iter().flatten() {
            targets[i] = Some(data.target(i));
        }
        Ok(Self {
            data,
            adam: AdamState::new(&net, T::of(cfg.lr)),
            grads: zeros_like(&net),
            validator: Validator::new(&net, data)?,
            net,
            rng: derive_rng(cfg.seed, &[domain::BATCH]),
            pools,
            images,
            targets,
            cache: ForwardCache::new(),
            cfg,
            step: 0,
            loss_sum: 0.0,
            loss_steps: 0,
            records: Vec::new(),
        })
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn into_network(self) -> Network<T> {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    fn image_loss(&self, logits: &GaussianLogitMap<T>, target: &TargetMask, key: StreamKey) -> Result<LossBreakdown<T>> {
        let cfg = &self.cfg;
        match cfg.loss_variant {
            LossVariant::BcePlain if logits.classes() == 1 => plain_bce_loss(logits, target),
            LossVariant::BcePlain => plain_ce_loss(logits, target),
            LossVariant::L2Unc => composite_l2_loss(logits, target, cfg.region_mode),
            LossVariant::BceUncBootstrap => {
                let params = BootstrapParams::new(T::of(cfg.tau), T::of(cfg.slope))?;
                composite_binary_loss(logits, target, &params, cfg.region_mode)
            }
            LossVariant::MultiClass => {
                let mc = McConfig::new(cfg.t_samples, cfg.seed)?;
                composite_multiclass_loss(logits, target, T::of(cfg.tau), &mc, key)
            }
        }
    }

    /// One optimizer step on a freshly composed batch; returns the mean loss.
    pub fn step(&mut self) -> Result<f64> {
        let slots = draw_slots(&self.pools, &self.cfg, &mut self.rng)?;
        for g in &mut self.grads {
            g.data_mut().fill(T::zero());
        }
        let mut total = 0.0;
        for (slot, &index) in slots.iter().enumerate() {
            let logits = self.net.forward_with(&self.images[index], &mut self.cache)?;
            let target = self.targets[index].as_ref().expect("training image has a target");
            let key = StreamKey {
                step: self.step,
                stream: ((slot as u64) << 32) | index as u64,
            };
            let out = self.image_loss(&logits, target, key)?;
            let loss = out.loss.as_f64();
            if !loss.is_finite() {
                let term = if !logits.mu().is_finite() {
                    "logit means"
                } else if !logits.log_var().is_finite() {
                    "log-variances"
                } else {
                    "loss value"
                };
                return Err(Error::NonFinite {
                    what: format!(
                        "{} loss at step {} (image {index}, non-finite {term})",
                        self.cfg.loss_variant,
                        self.step + 1
                    ),
                });
            }
            total += loss;
            self.net.backward_acc(&mut self.cache, &out.d_mu, &out.d_log_var, &mut self.grads)?;
        }
        let scale = T::one() / T::of(slots.len() as f64);
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        self.adam.step(&mut self.net, &self.grads)?;
        self.step += 1;
        let mean = total / slots.len() as f64;
        self.loss_sum += mean;
        self.loss_steps += 1;
        Ok(mean)
    }

    pub fn evaluate(&mut self) -> Result<Evaluation> {
        self.validator.run(&self.net, self.data, self.cfg.tau, |_| {})
    }

    /// Evaluates and appends a metrics record for the current step.
    pub fn record(&mut self) -> Result<&MetricsRecord> {
        let e = self.evaluate()?;
        let loss = if self.loss_steps == 0 {
            0.0
        } else {
            self.loss_sum / self.loss_steps as f64
        };
        self.loss_sum = 0.0;
        self.loss_steps = 0;
        self.records.push(MetricsRecord {
            step: self.step,
            loss,
            iou: e.iou,
            miou: e.miou,
            sigma2_in_mask: e.sigma2_in_mask,
            sigma2_in_band: e.sigma2_in_band,
            flip_frac: e.flip_frac,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    /// Runs the remaining steps, recording metrics every `eval_every` steps
    /// and after the last one.
    pub fn run(&mut self) -> Result<()> {
        while self.step < self.cfg.steps {
            self.step()?;
            if self.step.is_multiple_of(self.cfg.eval_every) || self.step == self.cfg.steps {
                self.record()?;
            }
        }
        Ok(())
    }
}

/// Trains a fresh network on `data`; returns it with its metrics history.
pub fn train<T: Scalar>(data: &Dataset, cfg: &TrainConfig) -> Result<(Network<T>, Vec<MetricsRecord>)> {
    let mut trainer = Trainer::new(data, cfg.clone())?;
    trainer.run()?;
    let records = trainer.records().to_vec();
    Ok((trainer.into_network(), records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SceneConfig;
    use crate::net::ParamSet;

    fn tiny(classes: u8, pp_ratio: f64) -> Dataset {
        let cfg = SceneConfig {
            width: 32,
            height: 32,
            classes,
            objects_max: 2,
            seed: 1,
            ..Default::default()
        };
        Dataset::generate(&cfg, 20, pp_ratio).unwrap()
    }

    fn quick(variant: LossVariant) -> TrainConfig {
        TrainConfig {
            loss_variant: variant,
            steps: 3,
            eval_every: 2,
            batch_size: 2,
            ..Default::default()
        }
    }

    #[test]
    fn batch_kind_extremes() {
        let data = tiny(1, 0.5);
        let mut rng = derive_rng(0, &[]);
        for (chance, kind) in [(1.0, LabelKind::PixelPerfect), (0.0, LabelKind::BoxDerived)] {
            let cfg = TrainConfig { pp_sampling_chance: chance, batch_size: 16, ..Default::default() };
            let batch = compose_batch(&data, &cfg, &mut rng).unwrap();
            assert_eq!(batch.len(), 16);
            assert!(batch.iter().all(|b| data.split.kinds[b.index] == kind));
            assert!(batch.iter().all(|b| b.target.kinds()[0] == kind));
        }
    }

    #[test]
    fn batch_kind_frequency() {
        let data = tiny(1, 0.5);
        let cfg = TrainConfig { batch_size: 10_000, ..Default::default() };
        let batch = compose_batch(&data, &cfg, &mut derive_rng(5, &[])).unwrap();
        let pp = batch.iter().filter(|b| data.split.kinds[b.index] == LabelKind::PixelPerfect).count();
        assert!((pp as f64 / 1e4 - 0.25).abs() <= 0.02);
    }

    #[test]
    fn empty_pool_is_an_error() {
        let data = tiny(1, 0.0);
        let cfg = TrainConfig { pp_sampling_chance: 1.0, ..Default::default() };
        assert!(matches!(compose_batch(&data, &cfg, &mut derive_rng(0, &[])), Err(Error::EmptyPool(_))));
    }

    #[test]
    fn variant_channels() {
        assert_eq!(LossVariant::BceUncBootstrap.logit_channels(1).unwrap(), 1);
        assert_eq!(LossVariant::BcePlain.logit_channels(2).unwrap(), 3);
        assert_eq!(LossVariant::MultiClass.logit_channels(2).unwrap(), 3);
        assert!(LossVariant::L2Unc.logit_channels(2).is_err());
        assert_eq!("MultiClass".parse::<LossVariant>().unwrap(), LossVariant::MultiClass);
        assert!("multiclass".parse::<LossVariant>().is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = tiny(1, 0.2);
        let cfg = TrainConfig { lr: 0.0, steps: 1, ..quick(LossVariant::BceUncBootstrap) };
        let (net, records) = train::<f64>(&data, &cfg).unwrap();
        assert_eq!(net, Network::new(3, 1, cfg.seed).unwrap());
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].step, 1);
    }

    #[test]
    fn every_variant_trains_deterministically() {
        for (variant, classes) in [
            (LossVariant::BcePlain, 1),
            (LossVariant::BcePlain, 2),
            (LossVariant::L2Unc, 1),
            (LossVariant::BceUncBootstrap, 1),
            (LossVariant::MultiClass, 2),
        ] {
            let data = tiny(classes, 0.2);
            let cfg = quick(variant);
            let a = train::<f64>(&data, &cfg).unwrap();
            let b = train::<f64>(&data, &cfg).unwrap();
            assert_eq!(a, b, "{variant}");
            assert_eq!(a.1.iter().map(|r| r.step).collect::<Vec<_>>(), vec![2, 3]);
            for r in &a.1 {
                assert!(r.loss.is_finite() && r.loss > 0.0);
                assert!(r.iou.iter().all(|v| (0.0..=1.0).contains(v)));
                assert!((0.0..=1.0).contains(&r.flip_frac));
            }
        }
    }

    #[test]
    fn plain_pixel_perfect_training_leaves_variance_head() {
        let data = tiny(1, 0.5);
        let cfg = TrainConfig {
            loss_variant: LossVariant::BcePlain,
            pp_sampling_chance: 1.0,
            lr: 0.01,
            ..quick(LossVariant::BcePlain)
        };
        let init = Network::<f64>::new(3, 1, cfg.seed).unwrap();
        let (net, _) = train::<f64>(&data, &cfg).unwrap();
        let (w0, w1) = (init.tensors()[4], net.tensors()[4]);
        let (b0, b1) = (init.tensors()[5], net.tensors()[5]);
        // head rows: channel 0 is the mean, channel 1 the log-variance
        assert_ne!(w0.channel(0), w1.channel(0));
        assert_eq!(w0.channel(1), w1.channel(1));
        assert_eq!(b0.data()[1], b1.data()[1]);
        assert_ne!(init.tensors()[0], net.tensors()[0]);
    }

    #[test]
    fn nothing_is_flipped_at_initialization() {
        let data = tiny(1, 0.2);
        let mut t = Trainer::<f64>::new(&data, quick(LossVariant::BceUncBootstrap)).unwrap();
        let e = t.evaluate().unwrap();
        assert_eq!(e.flip_frac, 0.0);
        assert!(e.sigma2_in_band < 0.5);
    }

    #[test]
    fn incompatible_network_is_rejected() {
        let data = tiny(2, 0.2);
        let net = Network::<f64>::new(3, 1, 0).unwrap();
        assert!(evaluate(&net, &data, 2.5).is_err());
    }
}
