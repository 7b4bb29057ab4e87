//! Point and box prompts, their perfect placement, and the imperfect-prompt
//! simulator.
//!
//! Coordinates are in pixel-index units: the pixel in column `x`, row `y` has
//! its centre at `(x, y)`, and valid coordinates lie in `[0, size - 1]`.
//! They are `f64` so that displacement and scale invariants can be checked
//! at sub-micro-pixel precision.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::Mask;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum PointLabel {
    Negative,
    Positive,
}

impl From<PointLabel> for u8 {
    fn from(l: PointLabel) -> u8 {
        match l {
            PointLabel::Negative => 0,
            PointLabel::Positive => 1,
        }
    }
}

impl TryFrom<u8> for PointLabel {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(PointLabel::Negative),
            1 => Ok(PointLabel::Positive),
            other => Err(format!("point label must be 0 or 1, got {other}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Prompt {
    Point { x: f64, y: f64, label: PointLabel },
    Box { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Prompt {
    pub fn point(x: f64, y: f64) -> Self {
        Prompt::Point { x, y, label: PointLabel::Positive }
    }

    pub fn boxed(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Prompt::Box { x0, y0, x1, y1 }
    }

    pub fn kind(&self) -> PromptKind {
        match self {
            Prompt::Point { .. } => PromptKind::Point,
            Prompt::Box { .. } => PromptKind::Box,
        }
    }

    /// Errors if any coordinate falls outside `[0, size - 1]`.
    pub fn check_bounds(&self, size: usize) -> Result<()> {
        let hi = (size - 1) as f64;
        let ok = |x: f64, y: f64| (0.0..=hi).contains(&x) && (0.0..=hi).contains(&y);
        match *self {
            Prompt::Point { x, y, .. } if !ok(x, y) => Err(Error::OutOfBounds { x, y, size }),
            Prompt::Box { x0, y0, .. } if !ok(x0, y0) => Err(Error::OutOfBounds { x: x0, y: y0, size }),
            Prompt::Box { x1, y1, .. } if !ok(x1, y1) => Err(Error::OutOfBounds { x: x1, y: y1, size }),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Point,
    Box,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Point => "point",
            PromptKind::Box => "box",
        }
    }

    /// Level of the unperturbed prompt: zero displacement, unit scale.
    pub fn perfect_level(self) -> f64 {
        match self {
            PromptKind::Point => 0.0,
            PromptKind::Box => 1.0,
        }
    }

    /// Benchmark grid of imperfect levels.
    pub fn imperfect_levels(self) -> &'static [f64] {
        match self {
            PromptKind::Point => &POINT_LEVELS,
            PromptKind::Box => &BOX_SCALES,
        }
    }

    /// Level as a percentage label (`25%`, `150%`).
    pub fn level_label(self, level: f64) -> String {
        format!("{}%", (level * 100.0).round() as i64)
    }
}

/// Point displacement as a fraction of the object radius.
pub const POINT_LEVELS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
/// Box scale factors about the box centre.
pub const BOX_SCALES: [f64; 4] = [0.5, 0.75, 1.25, 1.5];

/// Which prompt type to perturb, by how much, and with which random stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub kind: PromptKind,
    pub level: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            PromptKind::Point => (0.0..=1.0).contains(&self.level),
            PromptKind::Box => self.level > 0.0 && self.level.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("{} perturbation level {} out of range", self.kind.as_str(), self.level)))
        }
    }
}

/// Radius of the circle with the same area as the mask.
pub fn object_radius(mask: &Mask) -> Result<f64> {
    match mask.area() {
        0 => Err(Error::EmptyMask("object mask")),
        a => Ok((a as f64 / PI).sqrt()),
    }
}

/// Centre of mass of the foreground, snapped to the nearest foreground pixel
/// when the centroid's own pixel is background (concave shapes).
pub fn perfect_point(mask: &Mask) -> Result<Prompt> {
    let area = mask.area();
    if area == 0 {
        return Err(Error::EmptyMask("object mask"));
    }
    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    for (x, y) in mask.foreground() {
        sx += x as f64;
        sy += y as f64;
    }
    let (cx, cy) = (sx / area as f64, sy / area as f64);
    let (px, py) = (cx.round() as usize, cy.round() as usize);
    if mask.get(px, py) {
        return Ok(Prompt::point(cx, cy));
    }
    let (nx, ny) = mask
        .foreground()
        .min_by(|a, b| {
            let da = (a.0 as f64 - cx).powi(2) + (a.1 as f64 - cy).powi(2);
            let db = (b.0 as f64 - cx).powi(2) + (b.1 as f64 - cy).powi(2);
            da.total_cmp(&db)
        })
        .expect("mask is nonempty");
    Ok(Prompt::point(nx as f64, ny as f64))
}

/// Tight bounding box of the foreground, inclusive pixel centres.
pub fn perfect_box(mask: &Mask) -> Result<Prompt> {
    let mut it = mask.foreground();
    let (x, y) = it.next().ok_or(Error::EmptyMask("object mask"))?;
    let (mut x0, mut y0, mut x1, mut y1) = (x, y, x, y);
    for (x, y) in it {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    Ok(Prompt::boxed(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
}

/// Displacement `q·radius` in a uniformly random direction, before clamping.
pub fn displace_point(x: f64, y: f64, radius: f64, q: f64, rng: &mut impl Rng) -> (f64, f64) {
    let theta = rng.gen_range(0.0..2.0 * PI);
    let d = q * radius;
    (x + d * theta.cos(), y + d * theta.sin())
}

/// Moves a point prompt by `q` object radii in a random direction and clamps
/// it to the image. Box prompts pass through unchanged.
pub fn perturb_point(p: Prompt, radius: f64, q: f64, size: usize, rng: &mut impl Rng) -> Result<Prompt> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("point displacement fraction {q} outside [0, 1]")));
    }
    match p {
        Prompt::Point { x, y, label } => {
            if q == 0.0 {
                return Ok(p);
            }
            let (nx, ny) = displace_point(x, y, radius, q, rng);
            let hi = (size - 1) as f64;
            Ok(Prompt::Point { x: nx.clamp(0.0, hi), y: ny.clamp(0.0, hi), label })
        }
        b @ Prompt::Box { .. } => Ok(b),
    }
}

/// [`perturb_point`] with the radius taken from the object mask.
pub fn perturb_point_for_mask(p: Prompt, mask: &Mask, q: f64, rng: &mut impl Rng) -> Result<Prompt> {
    perturb_point(p, object_radius(mask)?, q, mask.size(), rng)
}

/// Scales width and height by `s` about the box centre, without clamping.
pub fn scale_box(x0: f64, y0: f64, x1: f64, y1: f64, s: f64) -> (f64, f64, f64, f64) {
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let (hw, hh) = ((x1 - x0) / 2.0 * s, (y1 - y0) / 2.0 * s);
    (cx - hw, cy - hh, cx + hw, cy + hh)
}

/// Smallest side a perturbed box may have, in pixels.
pub const MIN_BOX_SIDE: f64 = 2.0;

/// Scaled box clamped to the image, with sides widened to at least
/// [`MIN_BOX_SIDE`]. Point prompts pass through unchanged.
pub fn perturb_box(p: Prompt, s: f64, size: usize) -> Result<Prompt> {
    if !(s > 0.0) {
        return Err(Error::invalid(format!("box scale must be positive, got {s}")));
    }
    let Prompt::Box { x0, y0, x1, y1 } = p else { return Ok(p) };
    if s == 1.0 {
        return Ok(p);
    }
    let hi = (size - 1) as f64;
    let (a0, b0, a1, b1) = scale_box(x0, y0, x1, y1, s);
    let (x0, x1) = fit_span(a0.clamp(0.0, hi), a1.clamp(0.0, hi), hi);
    let (y0, y1) = fit_span(b0.clamp(0.0, hi), b1.clamp(0.0, hi), hi);
    Ok(Prompt::Box { x0, y0, x1, y1 })
}

fn fit_span(lo: f64, hi_v: f64, hi: f64) -> (f64, f64) {
    if hi_v - lo >= MIN_BOX_SIDE {
        return (lo, hi_v);
    }
    let c = (lo + hi_v) / 2.0;
    let lo = (c - MIN_BOX_SIDE / 2.0).clamp(0.0, hi - MIN_BOX_SIDE);
    (lo, lo + MIN_BOX_SIDE)
}

/// Applies `spec` to every prompt of the matching kind. `radius` is needed
/// only when points are perturbed.
pub fn apply_perturbation(
    prompts: &[Prompt],
    spec: &PerturbSpec,
    radius: Option<f64>,
    size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Prompt>> {
    spec.validate()?;
    prompts
        .iter()
        .map(|&p| match (p.kind(), spec.kind) {
            (PromptKind::Point, PromptKind::Point) => {
                let r = radius.ok_or_else(|| Error::invalid("point perturbation needs an object radius"))?;
                perturb_point(p, r, spec.level, size, rng)
            }
            (PromptKind::Box, PromptKind::Box) => perturb_box(p, spec.level, size),
            _ => Ok(p),
        })
        .collect()
}

/// [`apply_perturbation`] drawing from a ChaCha8 stream seeded with
/// `spec.seed`, so a spec fully determines its output.
pub fn perturb_seeded(prompts: &[Prompt], spec: &PerturbSpec, radius: Option<f64>, size: usize) -> Result<Vec<Prompt>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    apply_perturbation(prompts, spec, radius, size, &mut rng)
}
