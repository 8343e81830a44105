//! Seeded three-class synthetic image generator.
//!
//! * normal: speckled background only
//! * benign: a smooth, bright elliptical lesion
//! * malignant: an elliptical lesion filled with an oriented stripe texture
//!
//! Every image is a pure function of `(seed, class, index)`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassLabel, LabeledImage};
use crate::error::{Error, Result};
use crate::raster::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
    pub origin: String,
}

impl SynthConfig {
    /// 600 grayscale images of 64×64, 200 per class.
    pub fn desk(seed: u64) -> Self {
        Self {
            per_class: 200,
            size: 64,
            seed,
            origin: "synth".into(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.per_class == 0 || self.size < 16 {
            return Err(Error::Config("synthetic set needs per_class >= 1 and size >= 16".into()));
        }
        Ok(())
    }
}

pub fn file_name(class: ClassLabel, index: usize) -> String {
    format!("{class}_{index:04}.png")
}

/// Render one image.
pub fn render(cfg: &SynthConfig, class: ClassLabel, index: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(((class.index() as u64) << 32) | index as u64);
    let s = cfg.size as f64;
    let centre = (s - 1.0) / 2.0;
    let unit = s / 64.0;

    let base = rng.gen_range(0.22..0.32);
    let cy = centre + rng.gen_range(-6.0..6.0) * unit;
    let cx = centre + rng.gen_range(-6.0..6.0) * unit;
    let semi_a = rng.gen_range(12.0..20.0) * unit;
    let semi_b = rng.gen_range(12.0..20.0) * unit;
    let phi = rng.gen_range(0.0..PI);
    let stripe_angle = rng.gen_range(0.0..PI);
    let period = rng.gen_range(7.0..10.0) * unit;
    let phase = rng.gen_range(0.0..2.0 * PI);
    let (sp, cp) = phi.sin_cos();
    let (ss, cs) = stripe_angle.sin_cos();

    let n = cfg.size;
    let mut data = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let speckle = base + 0.12 * rng.gen::<f64>();
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let u = (dx * cp + dy * sp) / semi_a;
            let v = (-dx * sp + dy * cp) / semi_b;
            let r = (u * u + v * v).sqrt();
            // Soft edge over roughly one and a half pixels.
            let inside = ((1.0 - r) * semi_a.min(semi_b) / 1.5 + 0.5).clamp(0.0, 1.0);
            let lesion = match class {
                ClassLabel::Normal => speckle,
                ClassLabel::Benign => 0.82 + 0.06 * rng.gen::<f64>(),
                ClassLabel::Malignant => {
                    let t = (dx * cs + dy * ss) / period;
                    0.5 + 0.4 * (2.0 * PI * t + phase).sin()
                }
            };
            data.push(speckle + inside * (lesion - speckle));
        }
    }
    Image::new(n, n, 1, data).expect("values lie in [0, 1]")
}

/// Generate the whole set in memory, class by class.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<LabeledImage>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(3 * cfg.per_class);
    for class in ClassLabel::ALL {
        for i in 0..cfg.per_class {
            out.push(LabeledImage {
                pixels: render(cfg, class, i),
                label: class,
                sample_id: format!("{}/{class}/{}", cfg.origin, file_name(class, i)),
                origin: cfg.origin.clone(),
            });
        }
    }
    Ok(out)
}

/// Write the set as 8-bit grayscale PNGs under `root/<class>/`.
pub fn write_dataset(root: &Path, cfg: &SynthConfig) -> Result<usize> {
    write_counts(root, cfg, [cfg.per_class; 3])
}

/// Write `counts[c]` images of each class (in [`ClassLabel::ALL`] order),
/// ignoring `cfg.per_class`. Classes with a zero count get no directory.
pub fn write_counts(root: &Path, cfg: &SynthConfig, counts: [usize; 3]) -> Result<usize> {
    SynthConfig { per_class: 1, ..cfg.clone() }.validate()?;
    let mut written = 0;
    for (class, &count) in ClassLabel::ALL.iter().zip(&counts) {
        if count == 0 {
            continue;
        }
        let dir = root.join(class.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..count {
            let path = dir.join(file_name(*class, i));
            let pixels = render(cfg, *class, i);
            let bytes: Vec<u8> = pixels.data().iter().map(|v| (v * 255.0).round() as u8).collect();
            let gray = image::GrayImage::from_raw(cfg.size as u32, cfg.size as u32, bytes)
                .expect("buffer matches dimensions");
            gray.save(&path).map_err(|e| Error::Invalid(format!("cannot write {}: {e}", path.display())))?;
            written += 1;
        }
    }
    Ok(written)
}
