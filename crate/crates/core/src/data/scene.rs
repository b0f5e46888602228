//! Procedural scenes: textured background, blob-shaped objects, exact masks
//! and loosened bounding boxes.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::maps::{LabelKind, TargetMask};
use crate::rng::{derive_rng, domain};
use crate::tensor::TensorBuf;

/// Rejection-sampling budget per object.
pub const MAX_ATTEMPTS: usize = 100;
/// Smallest accepted object mask.
pub const MIN_OBJECT_PIXELS: usize = 16;

const MIN_SEMI_AXIS: f64 = 5.0;
const MAX_SEMI_AXIS: f64 = 12.0;
/// Largest relative radial deformation of the ellipse.
const MAX_DEFORM: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Number of object classes, 1 or 2.
    pub classes: u8,
    /// Inclusive range of objects per image.
    pub objects_min: usize,
    pub objects_max: usize,
    /// Largest per-side box loosening in pixels.
    pub jitter_max: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            classes: 1,
            objects_min: 1,
            objects_max: 3,
            jitter_max: 4,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.classes) {
            return Err(Error::InvalidParameter(format!(
                "classes must be 1 or 2, got {}",
                self.classes
            )));
        }
        if self.objects_min > self.objects_max {
            return Err(Error::InvalidParameter(format!(
                "objects_per_image range {}..{} is empty",
                self.objects_min, self.objects_max
            )));
        }
        if self.width < 3 || self.height < 3 || self.width > 4096 || self.height > 4096 {
            return Err(Error::InvalidParameter(format!(
                "image size {}x{} outside 3..=4096",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Axis-aligned box with inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxLabel {
    pub class: u8,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoxLabel {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// 3 x H x W, every value a multiple of 1/255.
    pub image: TensorBuf<f64>,
    /// Class id per pixel, 0 is background.
    pub true_mask: Vec<u8>,
    pub boxes: Vec<BoxLabel>,
}

impl SyntheticScene {
    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    fn in_box(&self) -> Vec<bool> {
        let w = self.width();
        (0..self.true_mask.len())
            .map(|p| self.boxes.iter().any(|b| b.contains(p % w, p / w)))
            .collect()
    }

    /// Ground-truth target: every pixel carries its true class.
    pub fn pixel_perfect_target(&self) -> TargetMask {
        let (h, w) = (self.height(), self.width());
        TargetMask::new(
            h,
            w,
            self.true_mask.clone(),
            vec![LabelKind::PixelPerfect; h * w],
            self.in_box(),
        )
        .expect("consistent scene")
    }
}

/// Box-derived target: box interiors take the box class, the smaller box
/// wins where boxes overlap.
pub fn rasterize_box_target(scene: &SyntheticScene) -> TargetMask {
    let (h, w) = (scene.height(), scene.width());
    let mut order: Vec<&BoxLabel> = scene.boxes.iter().collect();
    // paint larger boxes first so smaller ones end up on top
    order.sort_by_key(|b| std::cmp::Reverse(b.area()));
    let mut labels = vec![0u8; h * w];
    let mut in_box = vec![false; h * w];
    for b in order {
        for y in b.y0..=b.y1 {
            for x in b.x0..=b.x1 {
                labels[y * w + x] = b.class;
                in_box[y * w + x] = true;
            }
        }
    }
    TargetMask::new(h, w, labels, vec![LabelKind::BoxDerived; h * w], in_box).expect("box labels lie in boxes")
}

/// Ellipse with low-frequency radial deformation.
struct Blob {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
    harmonics: [(f64, f64); 2],
}

impl Blob {
    fn sample(rng: &mut ChaCha8Rng, width: usize, height: usize, margin: usize) -> Option<Self> {
        // semi-axes shrink with small images so an object still fits
        let fit = ((width.min(height) as f64 / 2.0) - margin as f64 - 1.0) / (1.0 + MAX_DEFORM);
        let hi = MAX_SEMI_AXIS.min(0.55 * fit);
        let lo = MIN_SEMI_AXIS.min(0.6 * hi);
        if hi < 2.0 {
            return None;
        }
        let a = rng.gen_range(lo..hi);
        let b = rng.gen_range(lo..hi);
        let theta = rng.gen_range(0.0..PI);
        let amp2 = rng.gen_range(0.0..0.15);
        let amp3 = rng.gen_range(0.0..MAX_DEFORM - 0.15);
        let harmonics = [(amp2, rng.gen_range(0.0..TAU)), (amp3, rng.gen_range(0.0..TAU))];
        let reach = a.max(b) * (1.0 + MAX_DEFORM);
        let lo = reach + margin as f64;
        let (hi_x, hi_y) = (width as f64 - 1.0 - lo, height as f64 - 1.0 - lo);
        if hi_x <= lo || hi_y <= lo {
            return None;
        }
        Some(Self {
            cx: rng.gen_range(lo..hi_x),
            cy: rng.gen_range(lo..hi_y),
            a,
            b,
            cos_t: theta.cos(),
            sin_t: theta.sin(),
            harmonics,
        })
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos_t + dy * self.sin_t) / self.a;
        let v = (-dx * self.sin_t + dy * self.cos_t) / self.b;
        let phi = v.atan2(u);
        let radius = 1.0
            + self.harmonics[0].0 * (2.0 * phi + self.harmonics[0].1).cos()
            + self.harmonics[1].0 * (3.0 * phi + self.harmonics[1].1).cos();
        u.hypot(v) <= radius
    }
}

/// Smooth per-channel background made of a few low-frequency waves.
fn background(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 * width * height];
    for plane in out.chunks_exact_mut(width * height) {
        let base = rng.gen_range(0.55..0.8);
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.02..0.05),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(0.0..TAU),
                )
            })
            .collect();
        for (p, v) in plane.iter_mut().enumerate() {
            let (x, y) = ((p % width) as f64, (p / width) as f64);
            *v = base + waves.iter().map(|&(amp, fx, fy, ph)| amp * (fx * x + fy * y + ph).sin()).sum::<f64>();
        }
    }
    out
}

/// Colour and texture of an object pixel. Objects are near-black on a
/// bright background so object and background pixels excite largely
/// disjoint first-layer units.
fn object_color(class: u8, shade: f64, x: f64, y: f64) -> [f64; 3] {
    match class {
        1 => {
            let t = 0.008 * (0.9 * x + 0.5 * y).sin();
            [0.12 + shade + t, 0.04 + shade + t, 0.03 + shade]
        }
        _ => {
            let t = if ((x as i64 / 2) + (y as i64 / 2)) % 2 == 0 { 0.008 } else { -0.008 };
            [0.03 + shade, 0.05 + shade + t, 0.12 + shade + t]
        }
    }
}

/// Renders scene `index`; a pure function of `(cfg, index)`.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<SyntheticScene> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let hw = w * h;
    let mut rng = derive_rng(cfg.seed, &[domain::SCENE, index]);
    let mut pixels = background(&mut rng, w, h);
    let mut mask = vec![0u8; hw];
    let mut boxes = Vec::new();

    let count = rng.gen_range(cfg.objects_min..=cfg.objects_max);
    for _ in 0..count {
        let class = rng.gen_range(1..=cfg.classes);
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let Some(blob) = Blob::sample(&mut rng, w, h, cfg.jitter_max) else {
                continue;
            };
            let cover: Vec<usize> = (0..hw)
                .filter(|&p| blob.contains((p % w) as f64, (p / w) as f64))
                .collect();
            if cover.len() < MIN_OBJECT_PIXELS || cover.iter().any(|&p| mask[p] != 0) {
                continue;
            }
            let xs = cover.iter().map(|&p| p % w);
            let ys = cover.iter().map(|&p| p / w);
            let tight = (xs.clone().min(), ys.clone().min(), xs.max(), ys.max());
            let (Some(x0), Some(y0), Some(x1), Some(y1)) = tight else {
                continue;
            };
            let m = cfg.jitter_max;
            if x0 < m || y0 < m || x1 + m >= w || y1 + m >= h || (x1 - x0 + 1) * (y1 - y0 + 1) == cover.len() {
                continue;
            }
            placed = Some((cover, (x0, y0, x1, y1)));
            break;
        }
        let Some((cover, (x0, y0, x1, y1))) = placed else {
            return Err(Error::Degenerate {
                index,
                reason: format!("could not place a valid object in {MAX_ATTEMPTS} attempts"),
            });
        };
        let shade = rng.gen_range(-0.01..0.01);
        for &p in &cover {
            mask[p] = class;
            let rgb = object_color(class, shade, (p % w) as f64, (p / w) as f64);
            for (c, v) in rgb.into_iter().enumerate() {
                pixels[c * hw + p] = v;
            }
        }
        let mut jitter = || rng.gen_range(0..=cfg.jitter_max);
        boxes.push(BoxLabel {
            class,
            x0: x0 - jitter(),
            y0: y0 - jitter(),
            x1: x1 + jitter(),
            y1: y1 + jitter(),
        });
    }

    for v in &mut pixels {
        let noisy = *v + rng.gen_range(-0.03..0.03);
        *v = (noisy.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    Ok(SyntheticScene {
        image: TensorBuf::from_vec([3, h, w], pixels)?,
        true_mask: mask,
        boxes,
    })
}
