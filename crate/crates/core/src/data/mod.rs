//! Synthetic benchmark: scene generation, label-kind split and storage.

pub mod netpbm;
mod scene;
mod store;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::maps::{LabelKind, TargetMask};
use crate::rng::{derive_rng, domain};

pub use scene::{
    generate_scene, rasterize_box_target, BoxLabel, SceneConfig, SyntheticScene, MAX_ATTEMPTS, MIN_OBJECT_PIXELS,
};
pub use store::{read_dataset, write_dataset, CHECKSUMS, MANIFEST};

/// Default fraction of pixel-perfect training images.
pub const DEFAULT_PP_RATIO: f64 = 0.18;
/// Fraction of images in the training partition.
pub const TRAIN_FRACTION: f64 = 0.8;
/// Smallest dataset [`make_split`] accepts.
pub const MIN_IMAGES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Val,
}

impl Partition {
    pub fn tag(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "train" => Some(Partition::Train),
            "val" => Some(Partition::Val),
            _ => None,
        }
    }
}

/// Label kind and partition of every image. Validation images are always
/// scored against their true masks and are recorded as pixel-perfect.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub kinds: Vec<LabelKind>,
    pub partitions: Vec<Partition>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    /// Training images of the given kind, ascending.
    pub fn train_indices(&self, kind: LabelKind) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.partitions[i] == Partition::Train && self.kinds[i] == kind)
            .collect()
    }

    pub fn val_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.partitions[i] == Partition::Val).collect()
    }
}

/// Shuffles images into an 80:20 train/val partition and marks exactly
/// `round(pp_ratio * n_train)` training images as pixel-perfect.
pub fn make_split(n_images: usize, pp_ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if n_images < MIN_IMAGES {
        return Err(Error::InvalidParameter(format!(
            "need at least {MIN_IMAGES} images for a split, got {n_images}"
        )));
    }
    if !(0.0..=1.0).contains(&pp_ratio) {
        return Err(Error::InvalidParameter(format!("pp_ratio must lie in [0, 1], got {pp_ratio}")));
    }
    let n_train = (TRAIN_FRACTION * n_images as f64).round() as usize;
    let n_pp = (pp_ratio * n_train as f64).round() as usize;
    let mut order: Vec<usize> = (0..n_images).collect();
    order.shuffle(&mut derive_rng(seed, &[domain::SPLIT]));
    let mut split = DatasetSplit {
        kinds: vec![LabelKind::PixelPerfect; n_images],
        partitions: vec![Partition::Val; n_images],
    };
    for (rank, &i) in order.iter().enumerate().take(n_train) {
        split.partitions[i] = Partition::Train;
        if rank >= n_pp {
            split.kinds[i] = LabelKind::BoxDerived;
        }
    }
    Ok(split)
}

/// Scenes plus their split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    pub classes: u8,
    pub scenes: Vec<SyntheticScene>,
    pub split: DatasetSplit,
}

impl Dataset {
    /// Generates `n` scenes from `cfg` and splits them with `cfg.seed`.
    pub fn generate(cfg: &SceneConfig, n: usize, pp_ratio: f64) -> Result<Self> {
        let split = make_split(n, pp_ratio, cfg.seed)?;
        let scenes = (0..n as u64)
            .map(|i| generate_scene(cfg, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            width: cfg.width,
            height: cfg.height,
            classes: cfg.classes,
            scenes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// The training target of image `i` according to its label kind.
    pub fn target(&self, i: usize) -> TargetMask {
        match self.split.kinds[i] {
            LabelKind::PixelPerfect => self.scenes[i].pixel_perfect_target(),
            LabelKind::BoxDerived => rasterize_box_target(&self.scenes[i]),
        }
    }
}
