//! Deterministic synthetic segmentation samples.
//!
//! Every sample is a grayscale `S×S` image holding one target object and up
//! to a few distractor objects of similar intensity that are *not* part of
//! the ground-truth mask. Distractors are what make a misplaced prompt
//! costly: a click that drifts off the target can land on something that
//! looks just like it.

mod io;
pub mod prompt;

pub use io::{read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use prompt::{
    apply_perturbation, object_radius, perfect_box, perfect_point, perturb_box, perturb_point,
    perturb_point_for_mask, perturb_seeded, scale_box, PerturbSpec, PointLabel, Prompt, PromptKind, BOX_SCALES, POINT_LEVELS,
};

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Square binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    size: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(size: usize) -> Self {
        Mask { size, bits: vec![false; size * size] }
    }

    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..size * size).map(|i| f(i % size, i / size)).collect();
        Mask { size, bits }
    }

    pub fn from_bits(size: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != size * size {
            return Err(Error::invalid(format!("{} bits for a {size}x{size} mask", bits.len())));
        }
        Ok(Mask { size, bits })
    }

    /// Pixels with positive logit.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let size = logits.shape()[0];
        Mask::from_bits(size, logits.data().iter().map(|&v| v > 0.0).collect())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        x < self.size && y < self.size && self.bits[y * self.size + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.size + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// `(x, y)` of every foreground pixel in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let s = self.size;
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(move |(i, _)| (i % s, i / s))
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.size, self.size],
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Ellipse,
    Blob,
    RoundedRect,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 3] = [ObjectKind::Ellipse, ObjectKind::Blob, ObjectKind::RoundedRect];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub size: usize,
    pub kinds: Vec<ObjectKind>,
    /// Upper bound on distractors; each sample draws `0..=max_distractors`.
    pub max_distractors: usize,
    pub noise_sigma: f32,
    /// Range of target intensity above the background level.
    pub contrast_range: (f32, f32),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 64,
            kinds: ObjectKind::ALL.to_vec(),
            max_distractors: 3,
            noise_sigma: 0.04,
            contrast_range: (0.3, 0.55),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub size: usize,
    /// Row-major intensities in `[0, 1]`.
    pub image: Vec<f32>,
    pub mask: Mask,
    pub seed: u64,
    pub kind: ObjectKind,
}

impl Sample {
    /// Image as an `[S, S, 1]` tensor.
    pub fn image_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.size, self.size, 1], self.image.clone())
    }

    pub fn area(&self) -> usize {
        self.mask.area()
    }

    pub fn centroid(&self) -> (f64, f64) {
        let a = self.mask.area().max(1) as f64;
        let (sx, sy) = self.mask.foreground().fold((0.0, 0.0), |(sx, sy), (x, y)| (sx + x as f64, sy + y as f64));
        (sx / a, sy / a)
    }

    pub fn perfect_prompt(&self, kind: PromptKind) -> Result<Prompt> {
        match kind {
            PromptKind::Point => perfect_point(&self.mask),
            PromptKind::Box => perfect_box(&self.mask),
        }
    }
}

/// A closed shape in pixel-index coordinates.
#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: ObjectKind,
    cx: f64,
    cy: f64,
    /// Half extents (ellipse axes, rectangle half sides, blob base radius in `a`).
    a: f64,
    b: f64,
    angle: f64,
    corner: f64,
    harmonics: [(f64, f64); 3],
}

impl Shape {
    fn random(kind: ObjectKind, size: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let s = size as f64 / 64.0 * scale;
        let (a, b) = match kind {
            ObjectKind::Ellipse => (rng.gen_range(5.0..14.0) * s, rng.gen_range(5.0..14.0) * s),
            ObjectKind::Blob => {
                let r = rng.gen_range(7.0..13.0) * s;
                (r, r)
            }
            ObjectKind::RoundedRect => (rng.gen_range(5.0..12.0) * s, rng.gen_range(5.0..12.0) * s),
        };
        let corner = rng.gen_range(0.2..0.5) * a.min(b);
        let angle = rng.gen_range(0.0..PI);
        let mut harmonics = [(0.0, 0.0); 3];
        for h in harmonics.iter_mut() {
            *h = (rng.gen_range(-0.15..0.15), rng.gen_range(0.0..2.0 * PI));
        }
        let reach = a.max(b) * if kind == ObjectKind::Blob { 1.45 } else { 1.0 } + 2.0;
        let lo = reach.min(size as f64 / 2.0);
        let hi = (size as f64 - 1.0 - reach).max(lo + 1e-6);
        let cx = rng.gen_range(lo..hi);
        let cy = rng.gen_range(lo..hi);
        Shape { kind, cx, cy, a, b, angle, corner, harmonics }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (sin, cos) = self.angle.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        match self.kind {
            ObjectKind::Ellipse => (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0,
            ObjectKind::Blob => {
                let phi = v.atan2(u);
                let wobble: f64 = self
                    .harmonics
                    .iter()
                    .enumerate()
                    .map(|(k, &(amp, ph))| amp * ((k as f64 + 2.0) * phi + ph).cos())
                    .sum();
                u.hypot(v) <= self.a * (1.0 + wobble)
            }
            ObjectKind::RoundedRect => {
                let qx = (u.abs() - (self.a - self.corner)).max(0.0);
                let qy = (v.abs() - (self.b - self.corner)).max(0.0);
                u.abs() <= self.a && v.abs() <= self.b && qx.hypot(qy) <= self.corner
            }
        }
    }

    fn rasterize(&self, size: usize) -> Mask {
        Mask::from_fn(size, |x, y| self.contains(x as f64, y as f64))
    }
}

/// Builds one sample from `seed`; identical inputs give bitwise identical samples.
pub fn generate_sample(seed: u64, cfg: &SynthConfig) -> Result<Sample> {
    if cfg.size < 32 {
        return Err(Error::invalid(format!("image size must be at least 32, got {}", cfg.size)));
    }
    if cfg.kinds.is_empty() {
        return Err(Error::invalid("no object kinds configured"));
    }
    let (c_lo, c_hi) = cfg.contrast_range;
    if !(c_lo <= c_hi) {
        return Err(Error::invalid("contrast range is inverted"));
    }
    let size = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let kind = *cfg.kinds.choose(&mut rng).expect("nonempty");
    let target = Shape::random(kind, size, 1.0, &mut rng);
    let mask = target.rasterize(size);

    // Background: base level plus a few slow sinusoids (bounded by 0.09).
    let base = rng.gen_range(0.15..0.3f32);
    let waves: Vec<(f64, f64, f64, f32)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.5..2.5) * 2.0 * PI / size as f64,
                rng.gen_range(0.0..PI),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.0..0.03f32),
            )
        })
        .collect();
    let mut image: Vec<f32> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64, (i / size) as f64);
            base + waves
                .iter()
                .map(|&(f, dir, ph, amp)| amp * (f * (x * dir.cos() + y * dir.sin()) + ph).sin() as f32)
                .sum::<f32>()
        })
        .collect();

    let fg = base + if c_hi > c_lo { rng.gen_range(c_lo..c_hi) } else { c_lo };

    // Distractors keep a two-pixel gap from the target.
    let n_distractors = rng.gen_range(0..=cfg.max_distractors);
    let guard = dilate(&mask, 2);
    for _ in 0..n_distractors {
        let dk = *cfg.kinds.choose(&mut rng).expect("nonempty");
        let level = fg + rng.gen_range(-0.06..0.06f32);
        for _attempt in 0..20 {
            let d = Shape::random(dk, size, rng.gen_range(0.7..1.0), &mut rng);
            let dm = d.rasterize(size);
            if dm.area() == 0 || dm.foreground().any(|(x, y)| guard.get(x, y)) {
                continue;
            }
            for (x, y) in dm.foreground() {
                image[y * size + x] = level;
            }
            break;
        }
    }
    for (x, y) in mask.foreground() {
        image[y * size + x] = fg;
    }
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0f32, cfg.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        for v in image.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(Sample { size, image, mask, seed, kind })
}

fn dilate(m: &Mask, r: usize) -> Mask {
    let s = m.size();
    let r = r as isize;
    Mask::from_fn(s, |x, y| {
        (-r..=r).any(|dy| {
            (-r..=r).any(|dx| {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                nx >= 0 && ny >= 0 && m.get(nx as usize, ny as usize)
            })
        })
    })
}

/// Per-sample seed for index `i` of a dataset built from `base_seed`.
pub fn sample_seed(base_seed: u64, i: u64) -> u64 {
    splitmix64(base_seed ^ splitmix64(i))
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_dataset(count: usize, base_seed: u64, cfg: &SynthConfig) -> Result<Vec<Sample>> {
    (0..count as u64).map(|i| generate_sample(sample_seed(base_seed, i), cfg)).collect()
}

/// Index sets of a seeded 7:1:2 train/validation/test partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn new(count: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..count).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = count * 7 / 10;
        let n_val = count / 10;
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Split { train: idx, val, test }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sample() {
        let cfg = SynthConfig::default();
        assert_eq!(generate_sample(11, &cfg).unwrap(), generate_sample(11, &cfg).unwrap());
        assert_ne!(generate_sample(11, &cfg).unwrap().image, generate_sample(12, &cfg).unwrap().image);
    }

    #[test]
    fn clean_high_contrast_thresholds_to_mask() {
        let cfg = SynthConfig { max_distractors: 0, noise_sigma: 0.0, contrast_range: (0.6, 0.65), ..Default::default() };
        for seed in 0..50 {
            let s = generate_sample(seed, &cfg).unwrap();
            let (lo, hi) = s.image.iter().fold((1.0f32, 0.0f32), |(l, h), &v| (l.min(v), h.max(v)));
            let mid = 0.5 * (lo + hi);
            let recovered = Mask::from_bits(s.size, s.image.iter().map(|&v| v > mid).collect()).unwrap();
            assert_eq!(recovered, s.mask, "seed {seed}");
        }
    }

    #[test]
    fn intensities_in_unit_range() {
        let s = generate_sample(5, &SynthConfig { noise_sigma: 0.3, ..Default::default() }).unwrap();
        assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn small_images_rejected() {
        assert!(generate_sample(0, &SynthConfig { size: 16, ..Default::default() }).is_err());
    }

    #[test]
    fn split_is_seven_one_two() {
        let s = Split::new(2000, 3);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1400, 200, 400));
        let mut all: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..2000).collect::<Vec<_>>());
    }
}
