//! Seeded affine augmentation: per-axis reflection, rotation, translation and
//! scaling, composed in the fixed order scale → rotate → translate → reflect.
//!
//! Transforms are an indexed pure function of `(seed, draw_index)`, so a
//! batch can be augmented in any order (or in parallel) with the same result.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::raster::Image;

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.gen();
        self.lo + (self.hi - self.lo) * u
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub reflect_x_prob: f64,
    pub reflect_y_prob: f64,
    /// Degrees. Sampled half-open, so `[0, 360]` never yields exactly 360.
    pub rotation_range_deg: Interval,
    /// Pixels, drawn independently for each axis.
    pub translate_range_px: Interval,
    /// Dimensionless, drawn independently for each axis.
    pub scale_range: Interval,
    pub seed: u64,
}

impl AugmentPolicy {
    /// Reflections at 50% per axis, any rotation, ±30 px shifts, 0.9–1.1 scaling.
    pub fn default_policy(seed: u64) -> Self {
        Self {
            reflect_x_prob: 0.5,
            reflect_y_prob: 0.5,
            rotation_range_deg: Interval::new(0.0, 360.0),
            translate_range_px: Interval::new(-30.0, 30.0),
            scale_range: Interval::new(0.9, 1.1),
            seed,
        }
    }

    /// A policy that always yields the identity transform.
    pub fn none(seed: u64) -> Self {
        Self {
            reflect_x_prob: 0.0,
            reflect_y_prob: 0.0,
            rotation_range_deg: Interval::point(0.0),
            translate_range_px: Interval::point(0.0),
            scale_range: Interval::point(1.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("reflect_x_prob", self.reflect_x_prob), ("reflect_y_prob", self.reflect_y_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        for (name, iv) in [
            ("rotation_range_deg", self.rotation_range_deg),
            ("translate_range_px", self.translate_range_px),
            ("scale_range", self.scale_range),
        ] {
            if !(iv.lo.is_finite() && iv.hi.is_finite()) || iv.lo > iv.hi {
                return Err(Error::Config(format!("{name} must satisfy lo <= hi, got {iv:?}")));
            }
        }
        if self.scale_range.lo <= 0.0 {
            return Err(Error::Config("scale_range bounds must be positive".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::none(self.seed)
    }
}

/// Forward map in centred pixel coordinates: `p' = matrix · p + offset`, with
/// points written as `(x, y)` relative to the image centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub matrix: [[f64; 2]; 2],
    pub offset: [f64; 2],
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        matrix: [[1.0, 0.0], [0.0, 1.0]],
        offset: [0.0, 0.0],
    };

    /// Compose from drawn parameters in the order scale → rotate → translate → reflect.
    pub fn compose(scale: [f64; 2], rotation_deg: f64, translate: [f64; 2], reflect: [bool; 2]) -> Self {
        let (s, c) = if rotation_deg == 0.0 {
            (0.0, 1.0)
        } else {
            rotation_deg.to_radians().sin_cos()
        };
        let rs = [[c * scale[0], -s * scale[1]], [s * scale[0], c * scale[1]]];
        let fx = if reflect[0] { -1.0 } else { 1.0 };
        let fy = if reflect[1] { -1.0 } else { 1.0 };
        AffineTransform {
            matrix: [[fx * rs[0][0], fx * rs[0][1]], [fy * rs[1][0], fy * rs[1][1]]],
            offset: [fx * translate[0], fy * translate[1]],
        }
    }

    fn inverse_matrix(&self) -> Option<[[f64; 2]; 2]> {
        let [[a, b], [c, d]] = self.matrix;
        let det = a * d - b * c;
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        Some([[d / det, -b / det], [-c / det, a / det]])
    }
}

/// Draw the transform for `draw_index` from the policy's stream.
pub fn sample_transform(p: &AugmentPolicy, draw_index: u64) -> AffineTransform {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    rng.set_stream(draw_index);
    let scale = [p.scale_range.draw(&mut rng), p.scale_range.draw(&mut rng)];
    let rotation = p.rotation_range_deg.draw(&mut rng);
    let translate = [p.translate_range_px.draw(&mut rng), p.translate_range_px.draw(&mut rng)];
    let rx = rng.gen::<f64>() < p.reflect_x_prob;
    let ry = rng.gen::<f64>() < p.reflect_y_prob;
    AffineTransform::compose(scale, rotation, translate, [rx, ry])
}

/// Warp an image by `t` with bilinear sampling and zero fill. Shape, label and
/// id are preserved.
pub fn apply(img: &LabeledImage, t: &AffineTransform) -> LabeledImage {
    LabeledImage {
        pixels: warp(&img.pixels, t),
        label: img.label,
        sample_id: img.sample_id.clone(),
        origin: img.origin.clone(),
    }
}

pub fn warp(src: &Image, t: &AffineTransform) -> Image {
    if *t == AffineTransform::IDENTITY {
        return src.clone();
    }
    let (h, w, ch) = (src.height(), src.width(), src.channels());
    let Some(inv) = t.inverse_matrix() else {
        return Image::zeros(h, w, ch);
    };
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut out = Image::zeros(h, w, ch);
    // Pull each output pixel back through the inverse map.
    for y in 0..h {
        let qy = y as f64 - cy - t.offset[1];
        for x in 0..w {
            let qx = x as f64 - cx - t.offset[0];
            let sx = inv[0][0] * qx + inv[0][1] * qy + cx;
            let sy = inv[1][0] * qx + inv[1][1] * qy + cy;
            for c in 0..ch {
                out.set(y, x, c, src.sample_bilinear(sy, sx, c));
            }
        }
    }
    out
}

/// Stateful view over a policy that counts how many transforms were drawn.
#[derive(Debug, Clone)]
pub struct Augmenter {
    policy: AugmentPolicy,
    draws: u64,
}

impl Augmenter {
    pub fn new(policy: AugmentPolicy) -> Self {
        Self { policy, draws: 0 }
    }

    pub fn policy(&self) -> &AugmentPolicy {
        &self.policy
    }

    /// Number of transforms sampled so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn augment(&mut self, img: &LabeledImage, draw_index: u64) -> LabeledImage {
        self.draws += 1;
        if self.policy.is_identity() {
            return img.clone();
        }
        apply(img, &sample_transform(&self.policy, draw_index))
    }
}
